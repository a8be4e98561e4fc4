//! Stage driver: every stage reads its upstream artifacts from an output
//! directory, writes its own, and leaves a JSON report under `reports/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::camera::CameraPose;
use crate::diffusion::{DiffusionConfig, DiffusionSample, LatentDiffusion};
use crate::geometry::{marching_cubes, pad_field, write_ply};
use crate::guidance::{
    edit_latents, sds_optimize, EditConfig, EditMask, ImagePrior, ImagePriorConfig, NegativeGuidedPrior, SdsConfig,
    ARTIFACT, CLEAN,
};
use crate::io::{self, Image};
use crate::lae::{LaeConfig, LaeSample, LaeTrainer, LatentAe, LatentTriple};
use crate::metrics;
use crate::rng::substream;
use crate::scene_ae::{PreparedScene, SceneAe, SceneAeConfig, SceneAeTrainer};
use crate::scene_encoder::VoxelGrid;
use crate::synthworld::{self, rig_poses, Bev, DatasetRecord, WorldConfig};
use crate::tensor::Tensor;
use crate::{NfError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub edit: EditConfig,
    pub prior: ImagePriorConfig,
    pub sds: SdsConfig,
    /// Scene-AE step whose checkpoint renders the prior's artifact class.
    pub artifact_step: usize,
    /// Views per scene fed to the image prior.
    pub prior_views: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            edit: EditConfig::default(),
            prior: ImagePriorConfig::default(),
            sds: SdsConfig::default(),
            artifact_step: 300,
            prior_views: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub views_per_sample: usize,
    /// Density threshold for mesh export.
    pub iso: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 16, views_per_sample: 8, iso: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub scene_steps: usize,
    pub lae_steps: usize,
    /// Independent initializations averaged per LAE variant.
    pub lae_seeds: usize,
    /// Training scenes used by the scene-AE variants.
    pub scenes: usize,
    pub voxel_dims: Vec<[usize; 3]>,
    pub lae_downsample: Vec<usize>,
    pub ddim_steps: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            scene_steps: 600,
            lae_steps: 400,
            lae_seeds: 1,
            scenes: 16,
            voxel_dims: vec![[4, 8, 8], [6, 12, 12], [8, 16, 16]],
            lae_downsample: vec![8, 4, 2],
            ddim_steps: vec![10, 50, 250],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub scene_ae: SceneAeConfig,
    pub lae: LaeConfig,
    pub ddm: DiffusionConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl PipelineConfig {
    /// Parses JSON, reporting the offending key path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let (section, field) = match path.split_once('.') {
                Some((s, f)) => (s.to_string(), f.to_string()),
                None => (path.clone(), String::new()),
            };
            NfError::Config { section, field, msg: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NfError::Config {
            section: "file".into(),
            field: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.scene_ae.validate(&self.world)?;
        self.lae.validate(self.world.grid_dims)?;
        self.ddm.validate()?;
        let bad = |section: &str, field: &str, msg: &str| {
            Err(NfError::Config { section: section.into(), field: field.into(), msg: msg.into() })
        };
        let sds = &self.guidance.sds;
        if sds.t_min > sds.t_max || sds.t_max >= self.guidance.prior.timesteps {
            return bad("guidance", "sds.t_max", "SDS timesteps must lie inside the prior schedule");
        }
        if sds.gamma < 1.0 {
            return bad("guidance", "sds.gamma", "negative guidance needs gamma >= 1");
        }
        if self.guidance.edit.steps == 0 || self.guidance.edit.steps > self.ddm.timesteps {
            return bad("guidance", "edit.steps", "must be in 1..=ddm.timesteps");
        }
        if self.guidance.artifact_step == 0 || self.guidance.artifact_step >= self.scene_ae.steps {
            return bad("guidance", "artifact_step", "must fall inside scene_ae.steps");
        }
        if self.eval.n_samples == 0 || self.eval.views_per_sample == 0 {
            return bad("eval", "n_samples", "must be positive");
        }
        if self.eval.views_per_sample > self.world.n_frames * self.world.n_cameras {
            return bad("eval", "views_per_sample", "exceeds views along one trajectory");
        }
        if !(self.eval.iso > 0.0) {
            return bad("eval", "iso", "must be positive");
        }
        if self.ablation.lae_seeds == 0 {
            return bad("ablation", "lae_seeds", "must be positive");
        }
        if self.world.n_train_scenes == 0 || self.world.n_test_scenes == 0 {
            return bad("world", "n_train_scenes", "need training and test scenes");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainSceneAe,
    TrainLae,
    TrainDdm,
    Sample,
    SampleBev,
    Edit,
    PostOpt,
    ExportMesh,
    Eval,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::GenData,
        Stage::TrainSceneAe,
        Stage::TrainLae,
        Stage::TrainDdm,
        Stage::Sample,
        Stage::SampleBev,
        Stage::Edit,
        Stage::PostOpt,
        Stage::ExportMesh,
        Stage::Eval,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainSceneAe => "train-scene-ae",
            Stage::TrainLae => "train-lae",
            Stage::TrainDdm => "train-ddm",
            Stage::Sample => "sample",
            Stage::SampleBev => "sample-bev",
            Stage::Edit => "edit",
            Stage::PostOpt => "post-opt",
            Stage::ExportMesh => "export-mesh",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = NfError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| NfError::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    VoxelDims,
    LaeDownsample,
    ExplicitDensity,
    DdimSteps,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] =
        [AblationAxis::VoxelDims, AblationAxis::LaeDownsample, AblationAxis::ExplicitDensity, AblationAxis::DdimSteps];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::VoxelDims => "voxel-dims",
            AblationAxis::LaeDownsample => "lae-downsample",
            AblationAxis::ExplicitDensity => "explicit-density",
            AblationAxis::DdimSteps => "ddim-steps",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = NfError;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| NfError::InvalidArgument(format!("unknown ablation axis {s:?}")))
    }
}

/// Per-invocation options on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub refine_steps: Option<usize>,
    pub bev: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Axes for `ablate`; empty runs all of them.
    pub axes: Vec<AblationAxis>,
}

/// Artifact locations under an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train")
    }
    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.nft"))
    }
    pub fn grids(&self) -> PathBuf {
        self.root.join("grids.nft")
    }
    pub fn latents(&self) -> PathBuf {
        self.root.join("latents.nft")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn samples_bev(&self) -> PathBuf {
        self.root.join("samples_bev")
    }
    pub fn report(&self, stage: &str) -> PathBuf {
        self.root.join("reports").join(format!("{stage}.json"))
    }
}

fn need(stage: Stage, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(NfError::MissingArtifact { stage: stage.name().into(), path: path.to_path_buf() })
    }
}

fn stage_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).gen()
}

fn write_report(layout: &Layout, stage: &str, report: &Value) -> Result<()> {
    let path = layout.report(stage);
    std::fs::create_dir_all(path.parent().expect("report path has a parent"))?;
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Runs one stage; returns its report (also written to `reports/<stage>.json`).
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<Value> {
    cfg.validate()?;
    let layout = Layout::new(out);
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let start = Instant::now();
    let mut report = match stage {
        Stage::GenData => gen_data(cfg, &layout)?,
        Stage::TrainSceneAe => train_scene_ae(cfg, &layout)?,
        Stage::TrainLae => train_lae(cfg, &layout, opts)?,
        Stage::TrainDdm => train_ddm(cfg, &layout)?,
        Stage::Sample => sample(cfg, &layout, None, Stage::Sample)?,
        Stage::SampleBev => sample_bev(cfg, &layout, opts)?,
        Stage::Edit => edit(cfg, &layout, opts)?,
        Stage::PostOpt => post_opt(cfg, &layout)?,
        Stage::ExportMesh => export_mesh(cfg, &layout)?,
        Stage::Eval => eval(cfg, &layout, opts)?,
        Stage::Ablate => ablate(cfg, &layout, &opts.axes)?,
    };
    report["stage"] = json!(stage.name());
    report["seconds"] = json!(start.elapsed().as_secs_f64());
    write_report(&layout, stage.name(), &report)?;
    Ok(report)
}

/// Runs the stages from data generation through evaluation in order.
pub fn run_all(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<Vec<Value>> {
    [
        Stage::GenData,
        Stage::TrainSceneAe,
        Stage::TrainLae,
        Stage::TrainDdm,
        Stage::Sample,
        Stage::SampleBev,
        Stage::Edit,
        Stage::PostOpt,
        Stage::ExportMesh,
        Stage::Eval,
    ]
    .into_iter()
    .map(|s| run_stage(s, cfg, out, opts))
    .collect()
}

fn test_ids(cfg: &PipelineConfig) -> std::ops::Range<u64> {
    let n = cfg.world.n_train_scenes as u64;
    n..n + cfg.world.n_test_scenes as u64
}

fn gen_data(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let w = &cfg.world;
    let train: Vec<DatasetRecord> = (0..w.n_train_scenes as u64)
        .map(|id| synthworld::generate_record(cfg.seed, id, w))
        .collect::<Result<_>>()?;
    let test: Vec<DatasetRecord> = test_ids(cfg).map(|id| synthworld::generate_record(cfg.seed, id, w)).collect::<Result<_>>()?;
    synthworld::write_dataset(&train, &layout.train_data())?;
    synthworld::write_dataset(&test, &layout.test_data())?;
    Ok(json!({
        "train_scenes": train.len(),
        "test_scenes": test.len(),
        "views_per_scene": w.views_per_scene(),
        "image_size": w.image_size,
    }))
}

fn load_records(stage: Stage, dir: &Path) -> Result<Vec<DatasetRecord>> {
    need(stage, &dir.join("index.json"))?;
    synthworld::read_dataset(dir)
}

fn prepare_all(ae: &SceneAe, records: &[DatasetRecord]) -> Result<Vec<PreparedScene>> {
    records.iter().map(|r| ae.prepare(r)).collect()
}

fn load_scene_ae(stage: Stage, cfg: &PipelineConfig, layout: &Layout, name: &str) -> Result<SceneAe> {
    let path = layout.checkpoint(name);
    need(stage, &path)?;
    let mut ae = SceneAe::new(cfg.scene_ae.clone(), cfg.world.clone(), 0)?;
    ae.load(&path)?;
    Ok(ae)
}

fn mean_report(reports: &[crate::render::SceneAeLossReport]) -> Value {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&crate::render::SceneAeLossReport) -> f32| reports.iter().map(|r| f(r) as f64).sum::<f64>() / n;
    json!({
        "image_recon": avg(|r| r.image_recon),
        "depth_mse": avg(|r| r.depth_mse),
        "opacity_entropy": avg(|r| r.opacity_entropy),
        "total": avg(|r| r.total),
    })
}

fn train_scene_ae(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let stage = Stage::TrainSceneAe;
    let train = load_records(stage, &layout.train_data())?;
    let test = load_records(stage, &layout.test_data())?;
    let mut ae = SceneAe::new(cfg.scene_ae.clone(), cfg.world.clone(), stage_seed(cfg.seed, "scene-ae-init"))?;
    let scenes = prepare_all(&ae, &train)?;
    let mut trainer = SceneAeTrainer::new(&ae, stage_seed(cfg.seed, "scene-ae-train"))?;
    let early = trainer.run(&mut ae, &scenes, cfg.guidance.artifact_step)?;
    ae.save(&layout.checkpoint("scene_ae_early"))?;
    let rest = trainer.run(&mut ae, &scenes, cfg.scene_ae.steps - cfg.guidance.artifact_step)?;
    ae.save(&layout.checkpoint("scene_ae"))?;
    drop(scenes);
    let test_scenes = prepare_all(&ae, &test)?;
    let psnr = ae.held_out_psnr(&test_scenes)?;
    let all: Vec<_> = early.iter().chain(&rest).cloned().collect();
    let tail = &all[all.len().saturating_sub(100)..];
    Ok(json!({
        "steps": all.len(),
        "first_loss": mean_report(&all[..all.len().min(20)]),
        "final_loss": mean_report(tail),
        "held_out_psnr": psnr,
    }))
}

/// Encoded (and optionally refined) grids of the training scenes, stacked.
struct GridSet {
    grids: Tensor,
    fill: Tensor,
}

impl GridSet {
    fn len(&self) -> usize {
        self.grids.shape()[0]
    }

    fn grid(&self, i: usize) -> Result<Tensor> {
        let per: usize = self.grids.shape()[1..].iter().product();
        Ok(Tensor::new(self.grids.shape()[1..].to_vec(), self.grids.data()[i * per..(i + 1) * per].to_vec())?)
    }

    fn fill_mask(&self, i: usize) -> Vec<bool> {
        let per = self.fill.shape()[1];
        self.fill.data()[i * per..(i + 1) * per].iter().map(|&v| v > 0.5).collect()
    }

    fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(path, [("grids", &self.grids), ("fill", &self.fill)])
    }

    fn load(path: &Path) -> Result<Self> {
        let mut grids = None;
        let mut fill = None;
        for (name, t) in io::load_checkpoint(path)? {
            match name.as_str() {
                "grids" => grids = Some(t),
                "fill" => fill = Some(t),
                _ => {}
            }
        }
        match (grids, fill) {
            (Some(grids), Some(fill)) => Ok(Self { grids, fill }),
            _ => Err(NfError::Format(format!("{} lacks grids/fill tensors", path.display()))),
        }
    }
}

fn encode_grids(ae: &SceneAe, scenes: &[PreparedScene], refine_steps: usize, seed: u64) -> Result<GridSet> {
    let mut grids = Vec::with_capacity(scenes.len());
    let mut fill = Vec::new();
    for s in scenes {
        let grid = ae.refine(&ae.encode(s)?, s, refine_steps, seed)?;
        grids.push(ae.grid_tensor(&grid));
        fill.extend(grid.fill_mask.iter().map(|&b| b as u8 as f32));
    }
    let nv = ae.spec.num_voxels();
    Ok(GridSet { grids: Tensor::stack(&grids)?, fill: Tensor::new([scenes.len(), nv], fill)? })
}

fn lae_samples<'a>(set: &GridSet, scenes: &'a [PreparedScene]) -> Result<Vec<LaeSample<'a>>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(LaeSample { grid: set.grid(i)?, fill_mask: set.fill_mask(i), scene: s }))
        .collect()
}

fn save_latents(path: &Path, lats: &[LatentTriple]) -> Result<()> {
    let n = lats.len();
    let stack_vec = |f: &dyn Fn(&LatentTriple) -> Vec<f32>| -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = lats.iter().map(f).collect();
        let d = rows.first().map_or(0, Vec::len);
        Ok(Tensor::new([n, d], rows.concat())?)
    };
    let g = stack_vec(&|l| l.g.clone())?;
    let traj = stack_vec(&|l| l.trajectory.clone())?;
    let ci = stack_vec(&|l| l.c_indices.iter().map(|&i| i as f32).collect())?;
    let fi = stack_vec(&|l| l.f_indices.iter().map(|&i| i as f32).collect())?;
    let c = Tensor::stack(&lats.iter().map(|l| l.c.clone()).collect::<Vec<_>>())?;
    let f = Tensor::stack(&lats.iter().map(|l| l.f.clone()).collect::<Vec<_>>())?;
    io::save_checkpoint(path, [("g", &g), ("trajectory", &traj), ("c", &c), ("f", &f), ("c_indices", &ci), ("f_indices", &fi)])
}

fn load_latents(path: &Path) -> Result<Vec<LatentTriple>> {
    let map: std::collections::HashMap<String, Tensor> = io::load_checkpoint(path)?.into_iter().collect();
    let get = |k: &str| map.get(k).ok_or_else(|| NfError::Format(format!("{} lacks tensor {k}", path.display())));
    let (g, traj, c, f, ci, fi) = (get("g")?, get("trajectory")?, get("c")?, get("f")?, get("c_indices")?, get("f_indices")?);
    let n = g.shape()[0];
    let row = |t: &Tensor, i: usize| -> Vec<f32> {
        let per = t.numel() / n.max(1);
        t.data()[i * per..(i + 1) * per].to_vec()
    };
    (0..n)
        .map(|i| {
            Ok(LatentTriple {
                g: row(g, i),
                trajectory: row(traj, i),
                c: Tensor::new(c.shape()[1..].to_vec(), row(c, i))?,
                f: Tensor::new(f.shape()[1..].to_vec(), row(f, i))?,
                c_indices: row(ci, i).into_iter().map(|v| v as usize).collect(),
                f_indices: row(fi, i).into_iter().map(|v| v as usize).collect(),
            })
        })
        .collect()
}

fn grid_shape(ae: &SceneAe) -> [usize; 4] {
    let [z, x, y] = ae.spec.dims;
    [ae.grid_channels(), z, x, y]
}

fn train_lae(cfg: &PipelineConfig, layout: &Layout, opts: &RunOptions) -> Result<Value> {
    let stage = Stage::TrainLae;
    let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
    let train = load_records(stage, &layout.train_data())?;
    let scenes = prepare_all(&ae, &train)?;
    let refine_steps = opts.refine_steps.unwrap_or(cfg.scene_ae.refine_steps);
    let set = encode_grids(&ae, &scenes, refine_steps, stage_seed(cfg.seed, "refine"))?;
    set.save(&layout.grids())?;
    let samples = lae_samples(&set, &scenes)?;
    let lae = LatentAe::new(cfg.lae.clone(), grid_shape(&ae), stage_seed(cfg.seed, "lae-init"))?;
    let mut trainer = LaeTrainer::new(lae, &ae)?;
    let initial = trainer.eval_voxel_recon(&samples)?;
    let reports = trainer.train(&samples, cfg.lae.steps, stage_seed(cfg.seed, "lae-train"))?;
    let fin = trainer.eval_voxel_recon(&samples)?;
    let lae = trainer.lae;
    lae.save(&layout.checkpoint("lae"))?;
    let lats: Vec<LatentTriple> = train
        .iter()
        .enumerate()
        .map(|(i, r)| lae.encode(&set.grid(i)?, scene_trajectory(r)))
        .collect::<Result<_>>()?;
    save_latents(&layout.latents(), &lats)?;
    let tail = &reports[reports.len().saturating_sub(100)..];
    let n = tail.len().max(1) as f64;
    Ok(json!({
        "refine_steps": refine_steps,
        "grids": set.len(),
        "initial_voxel_recon": initial,
        "final_voxel_recon": fin,
        "recon_ratio": initial / fin.max(1e-12),
        "final_kl": tail.iter().map(|r| r.kl as f64).sum::<f64>() / n,
        "final_vq": tail.iter().map(|r| r.vq as f64).sum::<f64>() / n,
        "final_image_recon": tail.iter().map(|r| r.image_recon as f64).sum::<f64>() / n,
        "coarse_codes_used": distinct(lats.iter().flat_map(|l| l.c_indices.iter().copied())),
        "fine_codes_used": distinct(lats.iter().flat_map(|l| l.f_indices.iter().copied())),
    }))
}

fn distinct(it: impl Iterator<Item = usize>) -> usize {
    it.collect::<std::collections::BTreeSet<_>>().len()
}

fn scene_trajectory(rec: &DatasetRecord) -> Vec<f32> {
    rec.scene.as_ref().map(|s| s.trajectory_vector()).unwrap_or_else(|| {
        // fall back to the recorded camera centers, one per frame
        (0..rec.n_frames())
            .flat_map(|f| {
                let t = rec.poses[rec.view(f, 0)].translation;
                [t[0] as f32, t[1] as f32]
            })
            .collect()
    })
}

fn load_lae(stage: Stage, cfg: &PipelineConfig, layout: &Layout, ae: &SceneAe) -> Result<LatentAe> {
    let path = layout.checkpoint("lae");
    need(stage, &path)?;
    let mut lae = LatentAe::new(cfg.lae.clone(), grid_shape(ae), 0)?;
    lae.load(&path)?;
    Ok(lae)
}

fn diffusion_shapes(cfg: &PipelineConfig, lae: &LatentAe, traj_len: usize) -> (usize, [usize; 3], [usize; 3]) {
    let [l, zc, xc, yc] = lae.coarse_shape();
    (cfg.lae.global_dim + traj_len, [l * zc, xc, yc], lae.fine_shape())
}

fn traj_len(cfg: &PipelineConfig) -> usize {
    2 * cfg.world.n_frames
}

fn train_ddm(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let stage = Stage::TrainDdm;
    need(stage, &layout.latents())?;
    let ae = SceneAe::new(cfg.scene_ae.clone(), cfg.world.clone(), 0)?;
    let lae = load_lae(stage, cfg, layout, &ae)?;
    let lats = load_latents(&layout.latents())?;
    let train = load_records(stage, &layout.train_data())?;
    if train.len() != lats.len() {
        return Err(NfError::Format(format!("{} latents for {} training scenes", lats.len(), train.len())));
    }
    let data: Vec<DiffusionSample> = lats
        .iter()
        .zip(&train)
        .map(|(l, r)| DiffusionSample::from_latents(l, r.bev.as_ref().map(Bev::one_hot)))
        .collect::<Result<_>>()?;
    let (g_dim, c_shape, f_shape) = diffusion_shapes(cfg, &lae, traj_len(cfg));
    let mut ddm = LatentDiffusion::new(cfg.ddm.clone(), g_dim, c_shape, f_shape, stage_seed(cfg.seed, "ddm-init"))?;
    let reports = ddm.train(&data, cfg.ddm.steps, stage_seed(cfg.seed, "ddm-train"))?;
    ddm.save(&layout.checkpoint("ddm"))?;
    let window = |r: &[crate::diffusion::DdmLossReport]| {
        let n = r.len().max(1) as f64;
        json!({
            "g": r.iter().map(|x| x.g as f64).sum::<f64>() / n,
            "c": r.iter().map(|x| x.c as f64).sum::<f64>() / n,
            "f": r.iter().map(|x| x.f as f64).sum::<f64>() / n,
        })
    };
    Ok(json!({
        "steps": reports.len(),
        "first_loss": window(&reports[..reports.len().min(50)]),
        "final_loss": window(&reports[reports.len().saturating_sub(100)..]),
    }))
}

fn load_ddm(stage: Stage, cfg: &PipelineConfig, layout: &Layout, lae: &LatentAe) -> Result<LatentDiffusion> {
    let path = layout.checkpoint("ddm");
    need(stage, &path)?;
    need(stage, &path.with_extension("stats.json"))?;
    let (g_dim, c_shape, f_shape) = diffusion_shapes(cfg, lae, traj_len(cfg));
    let mut ddm = LatentDiffusion::new(cfg.ddm.clone(), g_dim, c_shape, f_shape, 0)?;
    ddm.load(&path)?;
    Ok(ddm)
}

/// Rig poses along a (sampled) trajectory, clamped to the scene footprint;
/// the heading follows the overall direction of travel.
pub fn trajectory_poses(traj: &[f32], world: &WorldConfig) -> Result<Vec<CameraPose>> {
    let spec = world.grid()?;
    let ext = spec.extent();
    let pts: Vec<[f64; 2]> = traj
        .chunks_exact(2)
        .map(|p| {
            [
                (p[0] as f64).clamp(spec.origin[0], spec.origin[0] + ext[0]),
                (p[1] as f64).clamp(spec.origin[1], spec.origin[1] + ext[1]),
            ]
        })
        .collect();
    if pts.is_empty() {
        return Err(NfError::InvalidArgument("empty trajectory".into()));
    }
    let (a, b) = (pts[0], pts[pts.len() - 1]);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let heading = if dx.hypot(dy) > 1e-6 { dy.atan2(dx) } else { 0.0 };
    Ok(rig_poses(&pts, heading, world))
}

fn grid_of(ae: &SceneAe, t: &Tensor) -> Result<VoxelGrid> {
    ae.grid_from_tensor(t, vec![true; ae.spec.num_voxels()])
}

/// Renders the last `views` rig views along each latent's trajectory.
fn render_latents(
    ae: &SceneAe,
    lae: &LatentAe,
    lats: &[LatentTriple],
    views: usize,
    world: &WorldConfig,
) -> Result<(Vec<Tensor>, Vec<Vec<Image>>)> {
    let mut grids = Vec::with_capacity(lats.len());
    let mut renders = Vec::with_capacity(lats.len());
    for lat in lats {
        let t = lae.decode(lat)?;
        let poses = trajectory_poses(&lat.trajectory, world)?;
        let tail = &poses[poses.len().saturating_sub(views)..];
        renders.push(ae.render_images(&grid_of(ae, &t)?, tail)?);
        grids.push(t);
    }
    Ok((grids, renders))
}

fn write_renders(dir: &Path, renders: &[Vec<Image>], cols: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, views) in renders.iter().enumerate() {
        let sd = dir.join(format!("sample_{i:03}"));
        std::fs::create_dir_all(&sd)?;
        for (j, img) in views.iter().enumerate() {
            io::write_png(&sd.join(format!("view_{j:02}.png")), img)?;
        }
        io::write_png(&dir.join(format!("sample_{i:03}.png")), &io::tile_images(views, cols)?)?;
    }
    Ok(())
}

/// Reads back every `sample_*/view_*.png` under `dir`, in order.
pub fn read_renders(dir: &Path) -> Result<Vec<Image>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for sd in subdirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&sd)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        for f in files {
            out.push(io::read_png(&f)?);
        }
    }
    Ok(out)
}

fn sample(cfg: &PipelineConfig, layout: &Layout, bev: Option<Tensor>, stage: Stage) -> Result<Value> {
    let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
    let lae = load_lae(stage, cfg, layout, &ae)?;
    let ddm = load_ddm(stage, cfg, layout, &lae)?;
    let n = bev.as_ref().map_or(cfg.eval.n_samples, |b| b.shape()[0]);
    let seed = stage_seed(cfg.seed, stage.name());
    let lats = ddm.sample_hierarchy(&lae, n, bev.as_ref(), seed)?;
    let (grids, renders) = render_latents(&ae, &lae, &lats, cfg.eval.views_per_sample, &cfg.world)?;
    let dir = if stage == Stage::SampleBev { layout.samples_bev() } else { layout.samples() };
    write_renders(&dir, &renders, cfg.world.n_cameras)?;
    io::save_checkpoint(&dir.join("grids.nft"), [("grids", &Tensor::stack(&grids)?)])?;
    save_latents(&dir.join("latents.nft"), &lats)?;
    let mean_density: f64 = grids
        .iter()
        .map(|g| g.data()[..ae.spec.num_voxels()].iter().map(|&v| v as f64).sum::<f64>() / ae.spec.num_voxels() as f64)
        .sum::<f64>()
        / n as f64;
    let mut report = json!({
        "samples": n,
        "views_per_sample": renders.first().map_or(0, Vec::len),
        "ddim_steps": cfg.ddm.sample_steps,
        "mean_density": if ae.cfg.explicit_density { json!(mean_density) } else { Value::Null },
    });
    if let Some(b) = &bev {
        report["bev_agreement"] = json!(bev_agreement(&ae, &grids, b)?);
    }
    Ok(report)
}

/// Fraction of BEV cells whose object/ground label matches whether the
/// sampled column holds any voxel above unit density.
fn bev_agreement(ae: &SceneAe, grids: &[Tensor], bev: &Tensor) -> Result<f64> {
    if !ae.cfg.explicit_density {
        return Ok(f64::NAN);
    }
    let [z, x, y] = ae.spec.dims;
    let plane = x * y;
    let classes = bev.shape()[1];
    let mut hits = 0usize;
    for (i, g) in grids.iter().enumerate() {
        let b = &bev.data()[i * classes * plane..(i + 1) * classes * plane];
        for c in 0..plane {
            let object = b[c] < 0.5;
            let occupied = (1..z).any(|k| g.data()[k * plane + c] > 1.0);
            hits += (object == occupied) as usize;
        }
    }
    Ok(hits as f64 / (grids.len() * plane).max(1) as f64)
}

fn sample_bev(cfg: &PipelineConfig, layout: &Layout, opts: &RunOptions) -> Result<Value> {
    let stage = Stage::SampleBev;
    if !cfg.ddm.use_bev {
        return Err(NfError::Config {
            section: "ddm".into(),
            field: "use_bev".into(),
            msg: "sample-bev needs a BEV-conditioned model".into(),
        });
    }
    let maps: Vec<Tensor> = match &opts.bev {
        Some(path) => {
            need(stage, path)?;
            let b = Bev::from_image(&io::read_png(path)?);
            let [_, x, y] = cfg.world.grid_dims;
            if b.nx != x || b.ny != y {
                return Err(NfError::InvalidArgument(format!("BEV map is {}x{}, lattice is {x}x{y}", b.nx, b.ny)));
            }
            vec![b.one_hot(); cfg.eval.n_samples.min(4)]
        }
        None => {
            let test = load_records(stage, &layout.test_data())?;
            test.iter().take(cfg.eval.n_samples.min(4)).filter_map(|r| r.bev.as_ref().map(Bev::one_hot)).collect()
        }
    };
    if maps.is_empty() {
        return Err(NfError::InvalidArgument("no BEV maps available".into()));
    }
    sample(cfg, layout, Some(Tensor::stack(&maps)?), stage)
}

fn edit(cfg: &PipelineConfig, layout: &Layout, opts: &RunOptions) -> Result<Value> {
    let stage = Stage::Edit;
    need(stage, &layout.latents())?;
    let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
    let lae = load_lae(stage, cfg, layout, &ae)?;
    let ddm = load_ddm(stage, cfg, layout, &lae)?;
    let lat = load_latents(&layout.latents())?.remove(0);
    let [_, zc, xc, yc] = lae.coarse_shape();
    let dims = [zc, xc, yc];
    let mask = match &opts.mask {
        Some(p) => {
            need(stage, p)?;
            EditMask::from_png(p, dims)?
        }
        None => EditMask::keep_window(dims, 0..xc / 2, 0..yc),
    };
    let edited = edit_latents(&ddm, &lae, &lat, None, &mask, &cfg.guidance.edit, stage_seed(cfg.seed, "edit"))?;
    let plane = mask.keep.len();
    let (mut kept_same, mut kept, mut changed, mut resampled) = (0usize, 0usize, 0usize, 0usize);
    for (j, (a, b)) in lat.c.data().iter().zip(edited.c.data()).enumerate() {
        if mask.keep[j % plane] {
            kept += 1;
            kept_same += (a == b) as usize;
        } else {
            resampled += 1;
            changed += (a != b) as usize;
        }
    }
    let (grids, renders) =
        render_latents(&ae, &lae, &[lat, edited], cfg.eval.views_per_sample, &cfg.world)?;
    let dir = layout.root.join("edit");
    std::fs::create_dir_all(&dir)?;
    io::write_png(&dir.join("before.png"), &io::tile_images(&renders[0], cfg.world.n_cameras)?)?;
    io::write_png(&dir.join("after.png"), &io::tile_images(&renders[1], cfg.world.n_cameras)?)?;
    io::save_checkpoint(&dir.join("grids.nft"), [("before", &grids[0]), ("after", &grids[1])])?;
    Ok(json!({
        "mask_kept_cells": mask.keep.iter().filter(|&&k| k).count(),
        "mask_cells": plane,
        "kept_unchanged_fraction": kept_same as f64 / kept.max(1) as f64,
        "resampled_changed_fraction": changed as f64 / resampled.max(1) as f64,
    }))
}

fn prior_data(cfg: &PipelineConfig, layout: &Layout, early: &SceneAe) -> Result<Vec<(Tensor, usize)>> {
    let train = load_records(Stage::PostOpt, &layout.train_data())?;
    let mut data = Vec::new();
    for rec in &train {
        let scene = early.prepare(rec)?;
        let grid = early.encode(&scene)?;
        let views: Vec<usize> = scene.input_views.iter().copied().take(cfg.guidance.prior_views).collect();
        let poses: Vec<CameraPose> = views.iter().map(|&v| rec.poses[v]).collect();
        for img in early.render_images(&grid, &poses)? {
            data.push((img.to_chw(), ARTIFACT));
        }
        for &v in &views {
            data.push((rec.images[v].to_chw(), CLEAN));
        }
    }
    Ok(data)
}

fn post_opt(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let stage = Stage::PostOpt;
    let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
    let early = load_scene_ae(stage, cfg, layout, "scene_ae_early")?;
    let prior_path = layout.checkpoint("image_prior");
    let mut prior = ImagePrior::new(cfg.guidance.prior.clone(), stage_seed(cfg.seed, "prior-init"))?;
    let trained_prior = !prior_path.exists();
    if trained_prior {
        let data = prior_data(cfg, layout, &early)?;
        prior.train(&data, cfg.guidance.prior.steps, stage_seed(cfg.seed, "prior-train"))?;
        prior.save(&prior_path)?;
    } else {
        prior.load(&prior_path)?;
    }
    let test = load_records(stage, &layout.test_data())?;
    let rec = test.first().ok_or_else(|| NfError::InvalidArgument("no test scenes".into()))?;
    let scene = ae.prepare(rec)?;
    let grid = ae.encode(&scene)?;
    let poses: Vec<CameraPose> = scene.input_views.iter().map(|&v| rec.poses[v]).collect();
    let sds = &cfg.guidance.sds;
    let eval_seed = stage_seed(cfg.seed, "post-opt-eval");
    let loss_of = |g: &VoxelGrid| -> Result<f64> {
        let imgs: Vec<Tensor> = ae.render_images(g, &poses)?.iter().map(Image::to_chw).collect();
        prior.denoising_loss(&imgs, sds.t_min..sds.t_max + 1, 8, eval_seed)
    };
    let pre = loss_of(&grid)?;
    let guided = NegativeGuidedPrior { prior: &prior, gamma: sds.gamma };
    let mut rng = substream(cfg.seed, "sds");
    let optimized = sds_optimize(&ae, &ae.grid_tensor(&grid), &poses, &guided, sds, &mut rng)?;
    let opt_grid = ae.grid_from_tensor(&optimized, grid.fill_mask.clone())?;
    let post = loss_of(&opt_grid)?;
    let dir = layout.root.join("post_opt");
    std::fs::create_dir_all(&dir)?;
    let before = ae.render_images(&grid, &poses[..poses.len().min(cfg.world.n_cameras)])?;
    let after = ae.render_images(&opt_grid, &poses[..poses.len().min(cfg.world.n_cameras)])?;
    io::write_png(&dir.join("before.png"), &io::tile_images(&before, cfg.world.n_cameras)?)?;
    io::write_png(&dir.join("after.png"), &io::tile_images(&after, cfg.world.n_cameras)?)?;
    io::save_checkpoint(&dir.join("grids.nft"), [("before", &ae.grid_tensor(&grid)), ("after", &optimized)])?;
    Ok(json!({
        "prior_trained": trained_prior,
        "sds_steps": sds.steps,
        "gamma": sds.gamma,
        "denoising_loss_pre": pre,
        "denoising_loss_post": post,
    }))
}

fn export_mesh(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let stage = Stage::ExportMesh;
    let path = layout.samples().join("grids.nft");
    need(stage, &path)?;
    if !cfg.scene_ae.explicit_density {
        return Err(NfError::Config {
            section: "scene_ae".into(),
            field: "explicit_density".into(),
            msg: "mesh export needs an explicit density channel".into(),
        });
    }
    let spec = cfg.world.grid()?;
    let grids = io::load_checkpoint(&path)?
        .into_iter()
        .find(|(n, _)| n == "grids")
        .map(|(_, t)| t)
        .ok_or_else(|| NfError::Format(format!("{} lacks grids", path.display())))?;
    let dir = layout.root.join("meshes");
    std::fs::create_dir_all(&dir)?;
    let n = grids.shape()[0];
    let per = grids.numel() / n.max(1);
    let nv = spec.num_voxels();
    let mut meshes = Vec::with_capacity(n);
    for i in 0..n {
        let density = &grids.data()[i * per..i * per + nv];
        let (padded, pspec) = pad_field(density, &spec, 0.0)?;
        let mesh = marching_cubes(&padded, cfg.eval.iso, &pspec)?;
        write_ply(&mesh, &dir.join(format!("sample_{i:03}.ply")))?;
        meshes.push(json!({
            "vertices": mesh.vertices.len(),
            "triangles": mesh.triangles.len(),
            "closed": mesh.is_closed_manifold(),
        }));
    }
    Ok(json!({ "iso": cfg.eval.iso, "meshes": meshes }))
}

/// PSNR and mean L1 of held-out views, each scene encoded (and optionally refined).
fn held_out_metrics(ae: &SceneAe, scenes: &[PreparedScene], refine_steps: usize, seed: u64) -> Result<(f64, f64)> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for s in scenes {
        let grid = ae.refine(&ae.encode(s)?, s, refine_steps, seed)?;
        let full: Vec<CameraPose> = s
            .held_out_views
            .iter()
            .map(|&v| s.poses_lo[v].with_intrinsics(s.poses_lo[v].intrinsics.scaled(0.5)))
            .collect();
        preds.extend(ae.render_images(&grid, &full)?);
        targets.extend(s.held_out_views.iter().map(|&v| s.raw_images[v].clone()));
    }
    let psnr = metrics::mean_psnr(&preds, &targets)?;
    let (sum, count) = preds.iter().zip(&targets).fold((0.0, 0usize), |(s, c), (p, t)| {
        (s + p.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>(), c + p.data.len())
    });
    Ok((psnr, sum / count.max(1) as f64))
}

fn noise_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = substream(seed, "uniform-noise");
    (0..n)
        .map(|_| Image { width: size, height: size, data: (0..size * size * 3).map(|_| rng.gen::<f32>()).collect() })
        .collect()
}

fn held_out_images(records: &[DatasetRecord], cfg: &PipelineConfig) -> Vec<Image> {
    let nc = cfg.world.n_cameras;
    records
        .iter()
        .flat_map(|r| {
            cfg.scene_ae
                .held_out_frames
                .iter()
                .flat_map(move |&f| (0..nc).map(move |c| f * nc + c))
                .filter(|&v| v < r.images.len())
                .map(|v| r.images[v].clone())
        })
        .collect()
}

fn read_report(layout: &Layout, stage: &str) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(layout.report(stage)).ok()?).ok()
}

fn eval(cfg: &PipelineConfig, layout: &Layout, opts: &RunOptions) -> Result<Value> {
    let stage = Stage::Eval;
    need(stage, &layout.samples())?;
    let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
    let test = load_records(stage, &layout.test_data())?;
    let scenes = prepare_all(&ae, &test)?;
    let (psnr, l1) = held_out_metrics(&ae, &scenes, 0, 0)?;
    let refine_steps = opts.refine_steps.unwrap_or(cfg.scene_ae.refine_steps);
    let (psnr_refined, _) = held_out_metrics(&ae, &scenes, refine_steps, stage_seed(cfg.seed, "eval-refine"))?;
    let real = held_out_images(&test, cfg);
    let generated = read_renders(&layout.samples())?;
    let frechet = metrics::pixel_frechet(&real, &generated)?;
    let noise = noise_images(generated.len(), cfg.world.image_size, cfg.seed);
    let frechet_noise = metrics::pixel_frechet(&real, &noise)?;
    let mut losses = serde_json::Map::new();
    for s in [Stage::TrainSceneAe, Stage::TrainLae, Stage::TrainDdm, Stage::PostOpt] {
        if let Some(r) = read_report(layout, s.name()) {
            losses.insert(s.name().into(), r);
        }
    }
    let report = json!({
        "psnr": psnr,
        "psnr_refined": psnr_refined,
        "refine_steps": refine_steps,
        "held_out_l1": l1,
        "pixel_frechet": frechet,
        "pixel_frechet_uniform_noise": frechet_noise,
        "real_images": real.len(),
        "generated_images": generated.len(),
        "stages": losses,
    });
    let dir = layout.root.join("reports");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["metric", "value"])?;
    for key in ["psnr", "psnr_refined", "held_out_l1", "pixel_frechet", "pixel_frechet_uniform_noise"] {
        w.write_record([key, &report[key].to_string()])?;
    }
    w.flush()?;
    Ok(report)
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub psnr: Option<f64>,
}

fn scene_variant(
    cfg: &PipelineConfig,
    layout: &Layout,
    world: WorldConfig,
    scene_cfg: SceneAeConfig,
) -> Result<(f64, f64)> {
    let stage = Stage::Ablate;
    let scene_cfg = SceneAeConfig { steps: cfg.ablation.scene_steps, ..scene_cfg };
    let train = load_records(stage, &layout.train_data())?;
    let test = load_records(stage, &layout.test_data())?;
    let mut ae = SceneAe::new(scene_cfg, world, stage_seed(cfg.seed, "ablation-scene-init"))?;
    let scenes = prepare_all(&ae, &train[..cfg.ablation.scenes.min(train.len())])?;
    ae.train(&scenes, cfg.ablation.scene_steps, stage_seed(cfg.seed, "ablation-scene-train"))?;
    drop(scenes);
    let test_scenes = prepare_all(&ae, &test)?;
    let (psnr, l1) = held_out_metrics(&ae, &test_scenes, 0, 0)?;
    Ok((l1, psnr))
}

/// Trains the configured variants along `axis` and returns their rows.
pub fn ablation_runner(axis: AblationAxis, cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<AblationRow>> {
    let stage = Stage::Ablate;
    let a = &cfg.ablation;
    let row = |variant: String, metric: &str, value: f64, psnr: Option<f64>| AblationRow {
        axis: axis.name().into(),
        variant,
        metric: metric.into(),
        value,
        psnr,
    };
    let mut rows = Vec::new();
    match axis {
        AblationAxis::VoxelDims => {
            let base = &cfg.world;
            for dims in &a.voxel_dims {
                let mut world = base.clone();
                let ext: Vec<f64> = (0..3).map(|i| base.grid_dims[i] as f64 * base.voxel_size[i]).collect();
                world.grid_dims = *dims;
                world.voxel_size = [ext[0] / dims[0] as f64, ext[1] / dims[1] as f64, ext[2] / dims[2] as f64];
                world.validate()?;
                let (l1, psnr) = scene_variant(cfg, layout, world, cfg.scene_ae.clone())?;
                rows.push(row(format!("{}x{}x{}", dims[0], dims[1], dims[2]), "held_out_l1", l1, Some(psnr)));
            }
        }
        AblationAxis::ExplicitDensity => {
            for explicit in [false, true] {
                let sc = SceneAeConfig { explicit_density: explicit, ..cfg.scene_ae.clone() };
                let (l1, psnr) = scene_variant(cfg, layout, cfg.world.clone(), sc)?;
                let name = if explicit { "explicit" } else { "implicit" };
                rows.push(row(name.into(), "held_out_l1", l1, Some(psnr)));
            }
        }
        AblationAxis::LaeDownsample => {
            need(stage, &layout.grids())?;
            let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
            let set = GridSet::load(&layout.grids())?;
            let train = load_records(stage, &layout.train_data())?;
            let scenes = prepare_all(&ae, &train)?;
            let samples = lae_samples(&set, &scenes)?;
            let test = load_records(stage, &layout.test_data())?;
            let test_scenes = prepare_all(&ae, &test)?;
            let val_set = encode_grids(&ae, &test_scenes, cfg.scene_ae.refine_steps, stage_seed(cfg.seed, "refine-val"))?;
            let val = lae_samples(&val_set, &test_scenes)?;
            for &ds in &a.lae_downsample {
                let lc = LaeConfig { downsample: ds, ..cfg.lae.clone() };
                let mut total = 0.0;
                for k in 0..a.lae_seeds {
                    let init = stage_seed(cfg.seed, &format!("ablation-lae-init-{k}"));
                    let mut trainer = LaeTrainer::new(LatentAe::new(lc.clone(), grid_shape(&ae), init)?, &ae)?;
                    trainer.train(&samples, a.lae_steps, stage_seed(cfg.seed, &format!("ablation-lae-train-{k}")))?;
                    let v = trainer.eval_voxel_recon(&val)?;
                    log::info!(
                        "lae-downsample ds{ds} seed {k}: validation voxel recon {v:.4} (train {:.4})",
                        trainer.eval_voxel_recon(&samples)?
                    );
                    total += v;
                }
                rows.push(row(format!("ds{ds}"), "val_voxel_recon", total / a.lae_seeds as f64, None));
            }
        }
        AblationAxis::DdimSteps => {
            let ae = load_scene_ae(stage, cfg, layout, "scene_ae")?;
            let lae = load_lae(stage, cfg, layout, &ae)?;
            let mut ddm = load_ddm(stage, cfg, layout, &lae)?;
            let test = load_records(stage, &layout.test_data())?;
            let real = held_out_images(&test, cfg);
            for &steps in &a.ddim_steps {
                ddm.cfg.sample_steps = steps;
                let lats = ddm.sample_hierarchy(&lae, cfg.eval.n_samples, None, stage_seed(cfg.seed, "ablation-ddim"))?;
                let (_, renders) = render_latents(&ae, &lae, &lats, cfg.eval.views_per_sample, &cfg.world)?;
                let gen: Vec<Image> = renders.into_iter().flatten().collect();
                rows.push(row(format!("{steps}"), "pixel_frechet", metrics::pixel_frechet(&real, &gen)?, None));
            }
        }
    }
    Ok(rows)
}

/// Whether the rows follow the expected direction for their axis.
pub fn ablation_direction_holds(axis: AblationAxis, rows: &[AblationRow]) -> bool {
    let v: Vec<f64> = rows.iter().map(|r| r.value).collect();
    match axis {
        // rows ordered coarse to fine / implicit then explicit / few to many steps
        AblationAxis::VoxelDims | AblationAxis::LaeDownsample | AblationAxis::ExplicitDensity => {
            v.windows(2).all(|w| w[1] < w[0])
        }
        AblationAxis::DdimSteps => v.windows(2).all(|w| w[1] <= w[0]),
    }
}

fn ablate(cfg: &PipelineConfig, layout: &Layout, axes: &[AblationAxis]) -> Result<Value> {
    let axes: Vec<AblationAxis> = if axes.is_empty() { AblationAxis::ALL.to_vec() } else { axes.to_vec() };
    let dir = layout.root.join("reports");
    std::fs::create_dir_all(&dir)?;
    let mut out = serde_json::Map::new();
    for axis in axes {
        let rows = ablation_runner(axis, cfg, layout)?;
        let mut w = csv::Writer::from_path(dir.join(format!("ablation_{}.csv", axis.name())))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        out.insert(
            axis.name().into(),
            json!({ "rows": rows, "direction_holds": ablation_direction_holds(axis, &rows) }),
        );
    }
    Ok(Value::Object(out))
}

impl From<csv::Error> for NfError {
    fn from(e: csv::Error) -> Self {
        NfError::Format(format!("csv: {e}"))
    }
}
