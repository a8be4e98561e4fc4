use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nfldm::pipeline::{run_stage, AblationAxis, PipelineConfig, RunOptions, Stage};
use nfldm::NfError;

/// Runs one stage of the nfldm pipeline.
#[derive(Parser, Debug)]
#[command(name = "nfldm", version)]
struct Args {
    /// gen-data, train-scene-ae, train-lae, train-ddm, sample, sample-bev,
    /// edit, post-opt, export-mesh, eval or ablate
    stage: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-scene grid refinement steps (train-lae, eval).
    #[arg(long)]
    refine_steps: Option<usize>,
    /// BEV map PNG for sample-bev.
    #[arg(long)]
    bev: Option<PathBuf>,
    /// Keep-mask PNG for edit (white keeps).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Ablation axis; repeat for several, omit for all.
    #[arg(long)]
    axis: Vec<String>,
}

fn exit_code(e: &NfError) -> u8 {
    match e {
        NfError::Config { .. } => 2,
        NfError::MissingArtifact { .. } => 3,
        _ => 1,
    }
}

fn run(args: Args) -> Result<(), NfError> {
    let stage: Stage = args
        .stage
        .parse()
        .map_err(|e: NfError| NfError::Config { section: "cli".into(), field: "stage".into(), msg: e.to_string() })?;
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let axes = args
        .axis
        .iter()
        .map(|a| {
            a.parse::<AblationAxis>()
                .map_err(|e| NfError::Config { section: "cli".into(), field: "axis".into(), msg: e.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let opts = RunOptions { refine_steps: args.refine_steps, bev: args.bev, mask: args.mask, axes };
    let report = run_stage(stage, &cfg, &args.out, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
