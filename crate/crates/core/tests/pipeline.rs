use std::path::Path;

use nfldm::diffusion::DiffusionConfig;
use nfldm::guidance::{EditConfig, ImagePriorConfig, SdsConfig};
use nfldm::io::{self, Image};
use nfldm::lae::LaeConfig;
use nfldm::metrics::{mean_psnr, pixel_frechet};
use nfldm::pipeline::{read_renders, run_all, run_stage, trajectory_poses, PipelineConfig, RunOptions, Stage};
use nfldm::scene_ae::SceneAeConfig;
use nfldm::synthworld::WorldConfig;
use nfldm::NfError;

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: 3,
        world: WorldConfig { image_size: 16, n_train_scenes: 3, n_test_scenes: 2, ..WorldConfig::default() },
        scene_ae: SceneAeConfig {
            encoder_width: 8,
            decoder_width: 8,
            render_samples: 12,
            steps: 12,
            refine_steps: 2,
            ..SceneAeConfig::default()
        },
        lae: LaeConfig { width: 16, groups: 4, coarse_codebook: 32, fine_codebook: 16, steps: 6, ..LaeConfig::default() },
        ddm: DiffusionConfig {
            timesteps: 100,
            sample_steps: 5,
            g_hidden: 32,
            g_blocks: 1,
            unet_width: 16,
            groups: 4,
            temb_dim: 16,
            batch: 2,
            steps: 4,
            ..DiffusionConfig::default()
        },
        ..PipelineConfig::default()
    };
    cfg.guidance.artifact_step = 6;
    cfg.guidance.prior_views = 2;
    cfg.guidance.edit = EditConfig { steps: 5, ..EditConfig::default() };
    cfg.guidance.prior = ImagePriorConfig { width: 8, groups: 4, timesteps: 100, steps: 4, batch: 2, ..ImagePriorConfig::default() };
    cfg.guidance.sds = SdsConfig { t_min: 5, t_max: 50, steps: 3, ..SdsConfig::default() };
    cfg.eval.n_samples = 2;
    cfg
}

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn toy_pipeline_runs_end_to_end_and_is_deterministic() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let opts = RunOptions::default();
    let reports = run_all(&cfg, a.path(), &opts).unwrap();
    assert_eq!(reports.len(), 10);
    for r in &reports {
        let stage = r["stage"].as_str().unwrap();
        assert!(a.path().join(format!("reports/{stage}.json")).exists());
    }

    let sample = &reports[4];
    assert!(sample["views_per_sample"].as_u64().unwrap() >= 8);
    let renders = read_renders(&a.path().join("samples")).unwrap();
    assert_eq!(renders.len(), 2 * 8);
    assert_eq!((renders[0].width, renders[0].height), (16, 16));
    let edit = &reports[6];
    assert_eq!(edit["kept_unchanged_fraction"].as_f64(), Some(1.0));
    let meshes = &reports[8]["meshes"];
    assert_eq!(meshes.as_array().unwrap().len(), 2);
    assert!(a.path().join("meshes/sample_000.ply").exists());
    for m in meshes.as_array().unwrap() {
        assert!(m["triangles"].as_u64().unwrap() == 0 || m["closed"] == true, "{m}");
    }
    let eval = &reports[9];
    assert!(eval["psnr"].as_f64().unwrap() >= 0.0);
    assert!(eval["pixel_frechet"].as_f64().unwrap() >= 0.0);
    assert!(a.path().join("reports/metrics.csv").exists());

    let mut abl = cfg.clone();
    abl.ablation.scene_steps = 2;
    abl.ablation.lae_steps = 2;
    abl.ablation.scenes = 2;
    abl.ablation.ddim_steps = vec![2, 5];
    let report = run_stage(Stage::Ablate, &abl, a.path(), &opts).unwrap();
    for axis in ["voxel-dims", "lae-downsample", "explicit-density", "ddim-steps"] {
        assert!(!report[axis]["rows"].as_array().unwrap().is_empty(), "{axis}");
        assert!(a.path().join(format!("reports/ablation_{axis}.csv")).exists());
    }

    // rerunning a stage from the same inputs reproduces its checkpoints bit for bit
    let b = tempfile::tempdir().unwrap();
    for stage in [Stage::GenData, Stage::TrainSceneAe, Stage::TrainLae] {
        run_stage(stage, &cfg, b.path(), &opts).unwrap();
    }
    for f in ["checkpoints/scene_ae.nft", "checkpoints/scene_ae_early.nft", "checkpoints/lae.nft", "grids.nft", "latents.nft"] {
        assert!(file_bytes(&a.path().join(f)) == file_bytes(&b.path().join(f)), "{f} differs");
    }
}

#[test]
fn stages_report_missing_artifacts() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    for stage in [Stage::TrainSceneAe, Stage::TrainLae, Stage::TrainDdm, Stage::Sample, Stage::Edit, Stage::ExportMesh, Stage::Eval] {
        match run_stage(stage, &cfg, dir.path(), &RunOptions::default()) {
            Err(NfError::MissingArtifact { stage: s, .. }) => assert_eq!(s, stage.name()),
            other => panic!("{stage}: expected a missing artifact, got {other:?}"),
        }
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let text = serde_json::to_string(&PipelineConfig::default()).unwrap();
    let back = PipelineConfig::from_json(&text).unwrap();
    assert_eq!(back, PipelineConfig::default());

    match PipelineConfig::from_json(r#"{"lae": {"kl_wieght": 1.0}}"#) {
        Err(NfError::Config { section, msg, .. }) => {
            assert_eq!(section, "lae");
            assert!(msg.contains("kl_wieght"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(PipelineConfig::from_json(r#"{"extra": 1}"#), Err(NfError::Config { .. })));
    match PipelineConfig::from_json(r#"{"lae": {"downsample": 3}}"#) {
        Err(NfError::Config { section, field, .. }) => assert_eq!((section.as_str(), field.as_str()), ("lae", "downsample")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn defaults_carry_the_published_coefficients() {
    let c = PipelineConfig::default();
    assert_eq!((c.scene_ae.depth_weight, c.scene_ae.entropy_weight), (5.0, 0.01));
    assert_eq!((c.lae.density_weight, c.lae.kl_weight, c.lae.image_weight, c.lae.vq_weight), (2.5, 2e-5, 10.0, 1.0));
    assert_eq!((c.ddm.timesteps, c.ddm.sample_steps), (1000, 250));
    assert_eq!(c.scene_ae.refine_steps, 60);
    assert_eq!((c.scene_ae.lr, c.scene_ae.beta1, c.scene_ae.beta2), (2e-4, 0.0, 0.99));
}

#[test]
fn metric_identities() {
    let mut rng = nfldm::rng::seeded(0);
    use rand::Rng;
    let imgs: Vec<Image> = (0..20)
        .map(|_| Image::new(8, 8, (0..192).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect();
    assert_eq!(mean_psnr(&imgs, &imgs).unwrap(), 99.0);
    assert!(pixel_frechet(&imgs, &imgs).unwrap().abs() < 1e-6);
    let dir = tempfile::tempdir().unwrap();
    io::write_png(&dir.path().join("x.png"), &imgs[0]).unwrap();
}

#[test]
fn trajectory_poses_follow_the_direction_of_travel() {
    let w = WorldConfig::default();
    let traj: Vec<f32> = (0..9).flat_map(|i| [0.0, -1.0 + 0.25 * i as f32]).collect();
    let poses = trajectory_poses(&traj, &w).unwrap();
    assert_eq!(poses.len(), 9 * w.n_cameras);
    // front camera of the first frame heads along +y
    let fwd = poses[1].to_world_dir([0.0, 0.0, 1.0]);
    assert!(fwd[1] > 0.5 && fwd[0].abs() < 1e-9, "{fwd:?}");
    // points far outside the lattice are clamped onto it
    let far: Vec<f32> = vec![100.0; 18];
    let p = trajectory_poses(&far, &w).unwrap();
    assert!(p[0].translation[0] <= 4.0 + 1e-9);
}

#[test]
fn shipped_toy_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let cfg = PipelineConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.world.image_size, 32);
    assert_eq!(cfg.world.grid_dims, [8, 16, 16]);
    assert_eq!(cfg.world.n_cameras, 6);
}
