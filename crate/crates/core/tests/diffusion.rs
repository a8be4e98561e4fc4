use nfldm::diffusion::{
    eps_from_v, gaussian_oracle, ks_two_sample, make_vp_schedule, q_sample, randn_like, sample_ddim, sample_ddpm,
    v_target, x0_from_v, DiffusionConfig, DiffusionSample, LatentDiffusion,
};
use nfldm::rng::seeded;
use nfldm::tensor::{Graph, Tensor};

#[test]
fn schedule_is_variance_preserving_with_decreasing_snr() {
    for (t, b0, b1) in [(1000, 1e-4, 0.02), (50, 1e-3, 0.1), (2, 0.1, 0.2)] {
        let s = make_vp_schedule(t, b0, b1).unwrap();
        for i in 0..t {
            assert!((s.alphas[i].powi(2) + s.sigmas[i].powi(2) - 1.0).abs() < 1e-12);
        }
        assert!(s.log_snr.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn v_roundtrip_recovers_x0_and_eps() {
    let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = seeded(3);
    for t in [0, 1, 250, 500, 999] {
        let x0 = randn_like(&[64], &mut rng);
        let eps = randn_like(&[64], &mut rng);
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let v = v_target(&x0, &eps, t, &s).unwrap();
        let x0r = x0_from_v(&xt, &v, t, &s).unwrap();
        let er = eps_from_v(&xt, &v, t, &s).unwrap();
        assert!(x0r.sq_dist(&x0).sqrt() < 1e-5, "t={t}");
        assert!(er.sq_dist(&eps).sqrt() < 1e-5, "t={t}");
    }
}

/// Variance that deterministic DDIM with the exact denoiser leaves on standard-normal
/// data: each step from angle θ to θ' (cos θ = α) scales x by cos(θ - θ').
fn ddim_contraction(s: &nfldm::diffusion::NoiseSchedule, n_steps: usize) -> f64 {
    let ts = nfldm::diffusion::timestep_subset(s.alphas.len(), n_steps).unwrap();
    let mut theta: Vec<f64> = ts.iter().rev().map(|&t| s.alphas[t].acos()).collect();
    theta.push(0.0);
    theta.windows(2).map(|w| (w[0] - w[1]).cos().powi(2)).product()
}

#[test]
fn ddim_with_optimal_denoiser_matches_standard_normal() {
    let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
    let mut rng = seeded(7);
    let mut oracle = gaussian_oracle(0.0, 1.0, &s);
    let x = sample_ddim(&mut oracle, &s, &[2000], 50, 0.0, &mut rng).unwrap();
    let mean = x.mean();
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 2000.0;
    let expected = ddim_contraction(&s, 50);
    assert!(expected > 0.9 && expected < 0.95, "{expected}");
    assert!(mean.abs() < 0.05 && (var - expected).abs() < 0.05, "mean {mean} var {var} vs {expected}");
}

#[test]
fn ddpm_and_full_step_stochastic_ddim_agree() {
    let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
    let mut oracle = gaussian_oracle(0.3, 0.7, &s);
    let a = sample_ddpm(&mut oracle, &s, &[2000], &mut seeded(1)).unwrap();
    let b = sample_ddim(&mut oracle, &s, &[2000], 1000, 1.0, &mut seeded(2)).unwrap();
    let (d, crit) = ks_two_sample(a.data(), b.data());
    assert!(d < crit, "KS {d} >= {crit}");
}

fn tiny_ddm(use_bev: bool) -> LatentDiffusion {
    let cfg = DiffusionConfig {
        timesteps: 100,
        sample_steps: 10,
        g_hidden: 32,
        g_blocks: 2,
        unet_width: 16,
        groups: 4,
        temb_dim: 16,
        use_bev,
        batch: 2,
        ..DiffusionConfig::default()
    };
    LatentDiffusion::new(cfg, 6, [4, 2, 2], [2, 8, 8], 5).unwrap()
}

fn toy_data(n: usize, bev: bool) -> Vec<DiffusionSample> {
    let mut rng = seeded(9);
    (0..n)
        .map(|i| DiffusionSample {
            g: randn_like(&[6], &mut rng).into_data(),
            c: randn_like(&[4, 2, 2], &mut rng),
            f: randn_like(&[2, 8, 8], &mut rng),
            bev: bev.then(|| Tensor::from_fn([3, 8, 8], |j| ((j / 64) == i % 3) as u8 as f32)),
        })
        .collect()
}

#[test]
fn training_reduces_the_objective_and_checkpoints_roundtrip() {
    let mut ddm = tiny_ddm(true);
    let data = toy_data(4, true);
    let reports = ddm.train(&data, 60, 0).unwrap();
    let first: f32 = reports[..10].iter().map(|r| r.g + r.c + r.f).sum();
    let last: f32 = reports[50..].iter().map(|r| r.g + r.c + r.f).sum();
    assert!(last < first, "{first} -> {last}");
    assert!(reports.iter().all(|r| r.g.is_finite() && r.c.is_finite() && r.f.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ddm.nft");
    ddm.save(&path).unwrap();
    let mut other = tiny_ddm(true);
    other.load(&path).unwrap();
    let batch: Vec<DiffusionSample> = data.iter().map(|d| ddm.stats.normalize(d)).collect();
    let (mut g1, mut g2) = (Graph::new(), Graph::new());
    let (l1, _) = ddm.ddm_loss(&mut g1, &batch, &mut seeded(1)).unwrap();
    let (l2, _) = other.ddm_loss(&mut g2, &batch, &mut seeded(1)).unwrap();
    assert_eq!(g1.item(l1), g2.item(l2));
}

#[test]
fn hierarchical_sampling_shapes_and_determinism() {
    let mut ddm = tiny_ddm(true);
    // output layers start at zero; a few steps make the condition matter
    ddm.train(&toy_data(4, true), 10, 1).unwrap();
    let bev = Tensor::stack(&toy_data(3, true).into_iter().map(|d| d.bev.unwrap()).collect::<Vec<_>>()).unwrap();
    let a = ddm.sample_normalized(3, Some(&bev), 10, 0.0, &mut seeded(4)).unwrap();
    let b = ddm.sample_normalized(3, Some(&bev), 10, 0.0, &mut seeded(4)).unwrap();
    assert_eq!(a.g, b.g);
    assert_eq!(a.c, b.c);
    assert_eq!(a.f, b.f);
    assert_eq!((a.g.len(), a.c.shape(), a.f.shape()), (18, &[3, 4, 2, 2][..], &[3, 2, 8, 8][..]));
    let u = ddm.sample_normalized(3, None, 10, 0.0, &mut seeded(4)).unwrap();
    assert_ne!(u.f, a.f);
}
