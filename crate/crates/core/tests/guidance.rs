use nfldm::diffusion::{randn_like, DiffusionConfig, LatentDiffusion};
use nfldm::guidance::{
    edit_latents, guided_combine, inpaint_resample_normalized, negative_guidance_identity_check,
    sample_coarse_normalized, sds_gradient, EditConfig, EditMask, ImagePrior, ImagePriorConfig, NegativeGuidedPrior,
    OraclePrior, SdsConfig,
};
use nfldm::lae::{LaeConfig, LatentAe};
use nfldm::rng::seeded;
use nfldm::scene_ae::{SceneAe, SceneAeConfig};
use nfldm::synthworld::{rig_poses, WorldConfig};
use nfldm::tensor::Tensor;
use rand::Rng;

#[test]
fn negative_guidance_identity_on_random_vectors() {
    let mut rng = seeded(8);
    for gamma in [1.5, 2.0, 5.0] {
        for _ in 0..100 {
            let a: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (l, r) = negative_guidance_identity_check(&a, &b, gamma).unwrap();
            for (x, y) in l.iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn guidance_degeneracies_return_the_conditional_output() {
    let mut rng = seeded(1);
    let c = randn_like(&[50], &mut rng);
    let n = randn_like(&[50], &mut rng);
    assert_eq!(guided_combine(&c, &n, 1.0).unwrap(), c);
    for gamma in [1.5, 2.0, 5.0] {
        assert_eq!(guided_combine(&c, &c, gamma).unwrap(), c);
    }
}

// g: 6, c: [L·Zc, Xc, Yc] = [2·2, 2, 2], f: [2, 8, 8]
fn tiny_models() -> (LatentDiffusion, LatentAe) {
    let dcfg = DiffusionConfig {
        timesteps: 100,
        sample_steps: 10,
        g_hidden: 32,
        g_blocks: 1,
        unet_width: 16,
        groups: 4,
        temb_dim: 16,
        use_bev: false,
        ..DiffusionConfig::default()
    };
    let lcfg = LaeConfig {
        global_dim: 4,
        latent_channels: 2,
        width: 16,
        groups: 4,
        coarse_codebook: 16,
        fine_codebook: 8,
        ..LaeConfig::default()
    };
    let lae = LatentAe::new(lcfg, [3, 8, 8, 8], 2).unwrap();
    let ddm = LatentDiffusion::new(dcfg, 6, [4, 2, 2], [2, 8, 8], 3).unwrap();
    (ddm, lae)
}

#[test]
fn all_keep_mask_is_the_identity_on_c() {
    let (ddm, lae) = tiny_models();
    let grid = Tensor::rand_uniform([3, 8, 8, 8], 0.0, 1.0, &mut seeded(4));
    let lat = lae.encode(&grid, vec![0.1, -0.2]).unwrap();
    let mask = EditMask::filled([2, 2, 2], true);
    let cfg = EditConfig { steps: 8, ..EditConfig::default() };
    for seed in 0..4 {
        let out = edit_latents(&ddm, &lae, &lat, None, &mask, &cfg, seed).unwrap();
        assert_eq!(out.c, lat.c, "seed {seed}");
        assert_eq!(out.c_indices, lat.c_indices);
        assert_eq!((&out.g, &out.trajectory), (&lat.g, &lat.trajectory));
    }
}

#[test]
fn all_resample_without_guidance_is_an_unconditional_sample() {
    let (ddm, _) = tiny_models();
    let mut rng = seeded(6);
    let c_init = randn_like(&[1, 4, 2, 2], &mut rng);
    let g = randn_like(&[1, 6], &mut rng);
    let mask = EditMask::filled([2, 2, 2], false);
    for (seed, eta) in [(0, 0.0), (1, 0.0), (2, 0.7)] {
        let cfg = EditConfig { guidance_weight: 0.0, steps: 12, eta };
        let a = inpaint_resample_normalized(&ddm, &c_init, &g, None, &mask, &cfg, seed).unwrap();
        let b = sample_coarse_normalized(&ddm, &g, None, 12, eta, seed).unwrap();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn partial_mask_keeps_exactly_its_region() {
    let (ddm, _) = tiny_models();
    let mut rng = seeded(9);
    let c_init = randn_like(&[1, 4, 2, 2], &mut rng);
    let g = randn_like(&[1, 6], &mut rng);
    let mask = EditMask::keep_window([2, 2, 2], 0..1, 0..2);
    let cfg = EditConfig { steps: 10, ..EditConfig::default() };
    let out = inpaint_resample_normalized(&ddm, &c_init, &g, None, &mask, &cfg, 3).unwrap();
    for (j, (a, b)) in out.data().iter().zip(c_init.data()).enumerate() {
        if mask.keep[j % 8] {
            assert_eq!(a, b);
        } else {
            assert_ne!(a, b);
        }
    }
}

fn small_scene_ae() -> SceneAe {
    let world = WorldConfig { image_size: 16, ..WorldConfig::default() };
    let cfg = SceneAeConfig { render_samples: 12, encoder_width: 8, decoder_width: 8, ..SceneAeConfig::default() };
    SceneAe::new(cfg, world, 0).unwrap()
}

#[test]
fn oracle_prior_gives_an_exactly_zero_sds_gradient() {
    let ae = small_scene_ae();
    let [z, x, y] = ae.spec.dims;
    let grid = Tensor::rand_uniform([ae.grid_channels(), z, x, y], 0.0, 1.0, &mut seeded(2));
    let poses = rig_poses(&[[0.0, 0.0]], 0.3, &ae.world);
    let oracle = OraclePrior(nfldm::diffusion::make_vp_schedule(1000, 1e-4, 0.02).unwrap());
    let cfg = SdsConfig::default();
    let mut rng = seeded(3);
    for _ in 0..3 {
        let grad = sds_gradient(&ae, &grid, &poses, &oracle, &cfg, &mut rng).unwrap();
        assert_eq!(grad.shape(), grid.shape());
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }
    let prior = ImagePrior::new(ImagePriorConfig { width: 8, groups: 4, ..ImagePriorConfig::default() }, 1).unwrap();
    let guided = NegativeGuidedPrior { prior: &prior, gamma: 2.0 };
    let grad = sds_gradient(&ae, &grid, &poses, &guided, &cfg, &mut rng).unwrap();
    assert!(grad.data().iter().any(|&v| v != 0.0));
}
