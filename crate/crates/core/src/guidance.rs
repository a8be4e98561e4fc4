//! Classifier-free and negative guidance, masked resampling of the coarse
//! latent, score-distillation refinement of voxels against an image prior,
//! and voxel splicing.

use std::ops::Range;
use std::path::Path;

use nfldm_tensor::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{rot_z, CameraPose};
use crate::diffusion::{
    ddim_step, eps_from_v, make_vp_schedule, q_sample, randn_like, timestep_subset, DiffusionConfig,
    DiffusionSample, LatentDiffusion, Level, NoiseSchedule, UNet2d,
};
use crate::io::{self, Image};
use crate::lae::{LatentAe, LatentTriple};
use crate::rng::substream;
use crate::scene_ae::SceneAe;
use crate::scene_encoder::VoxelGrid;
use crate::{NfError, Result};

/// `gamma·cond + (1 - gamma)·neg`.
pub fn guided_combine(cond: &Tensor, neg: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma >= 1.0) {
        return Err(NfError::InvalidArgument(format!("guidance scale {gamma} must be >= 1")));
    }
    if cond.shape() != neg.shape() {
        return Err(NfError::InvalidArgument(format!("guidance shapes {:?} vs {:?}", cond.shape(), neg.shape())));
    }
    if gamma == 1.0 {
        return Ok(cond.clone());
    }
    Ok(cond.zip_map(neg, |c, n| (gamma * c as f64 + (1.0 - gamma) * n as f64) as f32)?)
}

/// Guided ε-prediction from conditional and negative/unconditional
/// v-predictions at `x_t`.
pub fn guided_predict(
    x_t: &Tensor,
    v_cond: &Tensor,
    v_neg: &Tensor,
    t: usize,
    gamma: f64,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let e_cond = eps_from_v(x_t, v_cond, t, s)?;
    if gamma == 1.0 {
        return Ok(e_cond);
    }
    let e_neg = eps_from_v(x_t, v_neg, t, s)?;
    guided_combine(&e_cond, &e_neg, gamma)
}

/// Both sides of `γ s_y + (1-γ) s_y' = (γ-1)(γ/(γ-1) s_y - s_y')`.
pub fn negative_guidance_identity_check(s_y: &[f64], s_neg: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if gamma == 1.0 || !gamma.is_finite() {
        return Err(NfError::InvalidArgument("the identity is undefined at gamma = 1".into()));
    }
    if s_y.len() != s_neg.len() {
        return Err(NfError::InvalidArgument("score vectors differ in length".into()));
    }
    let alpha = gamma / (gamma - 1.0);
    let lhs = s_y.iter().zip(s_neg).map(|(a, b)| gamma * a + (1.0 - gamma) * b).collect();
    let rhs = s_y.iter().zip(s_neg).map(|(a, b)| (gamma - 1.0) * (alpha * a - b)).collect();
    Ok((lhs, rhs))
}

/// Keep/resample flags over the coarse lattice `[Zc, Xc, Yc]`; `true` keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct EditMask {
    pub dims: [usize; 3],
    pub keep: Vec<bool>,
}

impl EditMask {
    pub fn filled(dims: [usize; 3], keep: bool) -> Self {
        Self { dims, keep: vec![keep; dims.iter().product()] }
    }

    /// Keeps every `(z, x, y)` with `(x, y)` inside the given horizontal window.
    pub fn keep_window(dims: [usize; 3], xs: Range<usize>, ys: Range<usize>) -> Self {
        let mut m = Self::filled(dims, false);
        for z in 0..dims[0] {
            for x in xs.clone() {
                for y in ys.clone() {
                    if x < dims[1] && y < dims[2] {
                        m.keep[(z * dims[1] + x) * dims[2] + y] = true;
                    }
                }
            }
        }
        m
    }

    /// A top-down PNG (rows X, columns Y; white keeps) resampled to the coarse
    /// lattice by nearest neighbour and extended over Z.
    pub fn from_image(img: &Image, dims: [usize; 3]) -> Self {
        let mut m = Self::filled(dims, false);
        for x in 0..dims[1] {
            for y in 0..dims[2] {
                let r = (x * img.height) / dims[1];
                let c = (y * img.width) / dims[2];
                let p = img.pixel(c, r);
                let on = (p[0] + p[1] + p[2]) / 3.0 > 0.5;
                for z in 0..dims[0] {
                    m.keep[(z * dims[1] + x) * dims[2] + y] = on;
                }
            }
        }
        m
    }

    pub fn from_png(path: &Path, dims: [usize; 3]) -> Result<Self> {
        Ok(Self::from_image(&io::read_png(path)?, dims))
    }

    /// Per-element keep weights for a Z-folded `[L·Zc, Xc, Yc]` latent.
    fn folded_weights(&self, channels: usize) -> Vec<f32> {
        let plane = self.keep.len();
        (0..channels * plane).map(|i| if self.keep[i % plane] { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub guidance_weight: f64,
    pub steps: usize,
    pub eta: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self { guidance_weight: 1.0, steps: 250, eta: 0.0 }
    }
}

/// Masked resampling of the standardized coarse latent `c_init: [1, L·Zc, Xc, Yc]`
/// given the standardized `g: [1, G]`. The kept region is re-noised from
/// `c_init` at every step (from a separate stream); reconstruction guidance
/// pulls the denoised estimate toward `c_init` there; the result carries
/// `c_init` exactly in the kept region.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_resample_normalized(
    diff: &LatentDiffusion,
    c_init: &Tensor,
    g_cond: &Tensor,
    bev: Option<&Tensor>,
    mask: &EditMask,
    cfg: &EditConfig,
    seed: u64,
) -> Result<Tensor> {
    let s = &diff.schedule;
    let shape = c_init.shape().to_vec();
    let channels = shape[1] / mask.dims[0];
    if shape.len() != 4
        || shape[0] != 1
        || shape[1] % mask.dims[0] != 0
        || shape[2] != mask.dims[1]
        || shape[3] != mask.dims[2]
        || channels * mask.dims[0] != diff.c_shape[0]
    {
        return Err(NfError::InvalidArgument(format!("mask {:?} does not match c {shape:?}", mask.dims)));
    }
    let keep = mask.folded_weights(channels);
    let any_keep = keep.iter().any(|&k| k > 0.0);
    let mut rng = substream(seed, "sample-coarse");
    let mut keep_rng = substream(seed, "inpaint-keep");
    let ts = timestep_subset(s.len(), cfg.steps)?;
    let mut x = randn_like(&shape, &mut rng);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        if any_keep {
            let noised = q_sample(c_init, t, &randn_like(&shape, &mut keep_rng), s)?;
            for (j, v) in x.data_mut().iter_mut().enumerate() {
                if keep[j] > 0.0 {
                    *v = noised.data()[j];
                }
            }
        }
        let prev = if i == 0 { None } else { Some(ts[i - 1]) };
        if cfg.guidance_weight > 0.0 && any_keep {
            let mut g = Graph::new();
            g.freeze(&diff.store);
            let xv = g.variable(x.clone());
            let gc = g.constant(g_cond.clone());
            let v = diff.forward(&mut g, Level::Coarse, xv, &[t], Some(gc), None, bev)?;
            let a = g.mul_scalar(xv, s.alphas[t] as f32);
            let b = g.mul_scalar(v, s.sigmas[t] as f32);
            let x0 = g.sub(a, b)?;
            let target = g.constant(c_init.clone());
            let d = g.sub(x0, target)?;
            let m = g.constant(Tensor::new(shape.clone(), keep.clone())?);
            let d = g.mul(d, m)?;
            let d = g.square(d);
            let loss = g.sum(d);
            let grad = g.backward(loss)?.get(xv).expect("x_t is a variable");
            let vt = g.tensor(v);
            x = ddim_step(&x, &vt, t, prev, cfg.eta, s, &mut rng)?;
            let w = cfg.guidance_weight as f32;
            for (o, gr) in x.data_mut().iter_mut().zip(grad.data()) {
                *o -= w * gr;
            }
        } else {
            let v = diff.predict_v(Level::Coarse, &x, t, Some(g_cond), None, bev)?;
            x = ddim_step(&x, &v, t, prev, cfg.eta, s, &mut rng)?;
        }
    }
    for (j, v) in x.data_mut().iter_mut().enumerate() {
        if keep[j] > 0.0 {
            *v = c_init.data()[j];
        }
    }
    Ok(x)
}

/// Plain DDIM sample of the standardized coarse latent given `g`, drawing from
/// the same stream as [`inpaint_resample_normalized`].
pub fn sample_coarse_normalized(
    diff: &LatentDiffusion,
    g_cond: &Tensor,
    bev: Option<&Tensor>,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = substream(seed, "sample-coarse");
    let shape = [&[1][..], &diff.c_shape[..]].concat();
    crate::diffusion::sample_ddim(
        &mut |x: &Tensor, t| diff.predict_v(Level::Coarse, x, t, Some(g_cond), None, bev),
        &diff.schedule,
        &shape,
        steps,
        eta,
        &mut rng,
    )
}

/// Edits a scene's latents: resamples `c` outside the kept region, then
/// resamples `f` given the edited `c`.
pub fn edit_latents(
    diff: &LatentDiffusion,
    lae: &LatentAe,
    lat: &LatentTriple,
    bev: Option<&Tensor>,
    mask: &EditMask,
    cfg: &EditConfig,
    seed: u64,
) -> Result<LatentTriple> {
    let normed = diff.stats.normalize(&DiffusionSample::from_latents(lat, None)?);
    let g_cond = Tensor::new([1, normed.g.len()], normed.g.clone())?;
    let mut cshape = vec![1];
    cshape.extend_from_slice(normed.c.shape());
    let c_init = normed.c.clone().reshape(cshape)?;
    let c_new = inpaint_resample_normalized(diff, &c_init, &g_cond, bev, mask, cfg, seed)?;
    let mut frng = substream(seed, "inpaint-fine");
    let fshape = [&[1][..], &diff.f_shape[..]].concat();
    let f_new = crate::diffusion::sample_ddim(
        &mut |x: &Tensor, t| diff.predict_v(Level::Fine, x, t, Some(&g_cond), Some(&c_new), bev),
        &diff.schedule,
        &fshape,
        cfg.steps,
        cfg.eta,
        &mut frng,
    )?;
    let raw = DiffusionSample { g: normed.g.clone(), c: c_new, f: f_new, bev: None };
    let mut out = diff.to_latents(lae, &raw, 1)?.remove(0);
    out.g = lat.g.clone();
    out.trajectory = lat.trajectory.clone();
    // requantization may move kept entries by rounding; restore them exactly
    let keep = mask.folded_weights(lae.cfg.latent_channels);
    let data = out.c.data_mut();
    for (j, v) in data.iter_mut().enumerate() {
        if keep[j] > 0.0 {
            *v = lat.c.data()[j];
        }
    }
    for (p, k) in mask.keep.iter().enumerate() {
        if *k {
            out.c_indices[p] = lat.c_indices[p];
        }
    }
    Ok(out)
}

/// Copies `b` into `a` inside the `(z, x, y)` box `region`.
pub fn splice_voxels(a: &VoxelGrid, b: &VoxelGrid, region: [Range<usize>; 3]) -> Result<VoxelGrid> {
    if a.spec != b.spec || a.feature.shape() != b.feature.shape() {
        return Err(NfError::InvalidArgument("splice_voxels needs grids with the same spec and channels".into()));
    }
    let [nz, nx, ny] = a.spec.dims;
    let mut out = a.clone();
    let nv = nz * nx * ny;
    let c = a.feature_channels();
    for z in region[0].start..region[0].end.min(nz) {
        for x in region[1].start..region[1].end.min(nx) {
            for y in region[2].start..region[2].end.min(ny) {
                let i = a.spec.flat_index([z, x, y]);
                out.density.data_mut()[i] = b.density.data()[i];
                out.fill_mask[i] = b.fill_mask[i];
                for ch in 0..c {
                    out.feature.data_mut()[ch * nv + i] = b.feature.data()[ch * nv + i];
                }
            }
        }
    }
    Ok(out)
}

pub const CLEAN: usize = 0;
pub const ARTIFACT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagePriorConfig {
    pub width: usize,
    pub groups: usize,
    pub temb_dim: usize,
    pub embed_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch: usize,
    pub lr: f32,
    pub steps: usize,
}

impl Default for ImagePriorConfig {
    fn default() -> Self {
        Self {
            width: 16,
            groups: 4,
            temb_dim: 32,
            embed_dim: 16,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            batch: 4,
            lr: 1e-3,
            steps: 600,
        }
    }
}

/// Image-space diffusion model with two learned condition embeddings: clean
/// renders and renders showing autoencoder artifacts. Images are mapped from
/// `[0, 1]` to `[-1, 1]`.
pub struct ImagePrior {
    pub cfg: ImagePriorConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    unet: UNet2d,
    embed: ParamId,
}

impl ImagePrior {
    pub fn new(cfg: ImagePriorConfig, seed: u64) -> Result<Self> {
        let schedule = make_vp_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
        let net = DiffusionConfig {
            unet_width: cfg.width,
            groups: cfg.groups,
            temb_dim: cfg.temb_dim,
            ..DiffusionConfig::default()
        };
        let mut rng = substream(seed, "image-prior-init");
        let mut store = ParamStore::new();
        let unet = UNet2d::new(&mut store, "prior", 3, 3, &net, Some(cfg.embed_dim), &mut rng);
        let embed = store.add("prior.embed", Tensor::randn([2, cfg.embed_dim], 1.0, &mut rng));
        Ok(Self { cfg, schedule, store, unet, embed })
    }

    pub fn forward_v(&self, g: &mut Graph, x_t: nfldm_tensor::Var, ts: &[usize], class: usize) -> Result<nfldm_tensor::Var> {
        let table = g.param(&self.store, self.embed);
        let cond = g.gather_rows(table, &vec![class; ts.len()])?;
        self.unet.forward(g, &self.store, x_t, ts, Some(cond), None)
    }

    pub fn predict_v(&self, x_t: &Tensor, t: usize, class: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let x = g.constant(x_t.clone());
        let v = self.forward_v(&mut g, x, &vec![t; x_t.shape()[0]], class)?;
        Ok(g.tensor(v))
    }

    /// Trains on `(image [3, H, W] in [0, 1], class)` pairs.
    pub fn train(&mut self, data: &[(Tensor, usize)], steps: usize, seed: u64) -> Result<Vec<f32>> {
        if data.is_empty() {
            return Err(NfError::InvalidArgument("image prior needs training images".into()));
        }
        let mut rng = substream(seed, "image-prior-train");
        let mut adam = AdamState::new(
            &self.store,
            AdamConfig { lr: self.cfg.lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 },
        )?;
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let class = step % 2;
            let pool: Vec<&Tensor> = data.iter().filter(|d| d.1 == class).map(|d| &d.0).collect();
            let pool: Vec<&Tensor> = if pool.is_empty() { data.iter().map(|d| &d.0).collect() } else { pool };
            let batch: Vec<Tensor> =
                (0..self.cfg.batch).map(|_| to_signed(pool[rng.gen_range(0..pool.len())])).collect();
            let x0 = Tensor::stack(&batch)?;
            let mut g = Graph::new();
            let loss = self.v_loss(&mut g, &x0, class, &mut rng)?;
            losses.push(g.item(loss));
            let grads = g.backward(loss)?.for_store(&self.store);
            adam.step(&mut self.store, &grads)?;
            if step % 100 == 0 {
                log::info!("image prior step {step}: {}", losses[step]);
            }
        }
        Ok(losses)
    }

    fn v_loss<R: Rng + ?Sized>(&self, g: &mut Graph, x0: &Tensor, class: usize, rng: &mut R) -> Result<nfldm_tensor::Var> {
        let n = x0.shape()[0];
        let per = x0.numel() / n;
        let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.schedule.len())).collect();
        let eps = randn_like(x0.shape(), rng);
        let (mut xt, mut vt) = (x0.clone(), x0.clone());
        for (i, &t) in ts.iter().enumerate() {
            let (a, s) = (self.schedule.alphas[t], self.schedule.sigmas[t]);
            for j in i * per..(i + 1) * per {
                let (x, e) = (x0.data()[j] as f64, eps.data()[j] as f64);
                xt.data_mut()[j] = (a * x + s * e) as f32;
                vt.data_mut()[j] = (a * e - s * x) as f32;
            }
        }
        let xv = g.constant(xt);
        let pred = self.forward_v(g, xv, &ts, class)?;
        let target = g.constant(vt);
        let d = g.sub(pred, target)?;
        let d = g.square(d);
        Ok(g.mean(d))
    }

    /// Mean squared ε-error of the clean-conditioned prior on `images` (in
    /// `[0, 1]`) over fixed draws of `t ∈ t_range` and noise.
    pub fn denoising_loss(&self, images: &[Tensor], t_range: Range<usize>, draws: usize, seed: u64) -> Result<f64> {
        let mut rng = substream(seed, "prior-eval");
        let mut total = 0.0;
        let mut count = 0usize;
        for img in images {
            let x0 = to_signed(img);
            let x0 = x0.clone().reshape([&[1][..], x0.shape()].concat())?;
            for _ in 0..draws {
                let t = rng.gen_range(t_range.clone());
                let eps = randn_like(x0.shape(), &mut rng);
                let xt = q_sample(&x0, t, &eps, &self.schedule)?;
                let v = self.predict_v(&xt, t, CLEAN)?;
                let e = eps_from_v(&xt, &v, t, &self.schedule)?;
                total += e.sq_dist(&eps) / eps.numel() as f64;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(path, self.store.iter())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load_from(io::load_checkpoint(path)?)?;
        Ok(())
    }
}

fn to_signed(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

/// Source of guided noise predictions for score distillation. `noise` is the
/// noise actually added, which only an oracle may look at.
pub trait EpsPrior {
    fn schedule(&self) -> &NoiseSchedule;
    fn guided_eps(&self, x_t: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor>;
}

/// Returns the true noise: a perfect denoiser.
pub struct OraclePrior(pub NoiseSchedule);

impl EpsPrior for OraclePrior {
    fn schedule(&self) -> &NoiseSchedule {
        &self.0
    }

    fn guided_eps(&self, _x_t: &Tensor, _t: usize, noise: &Tensor) -> Result<Tensor> {
        Ok(noise.clone())
    }
}

/// The image prior guided toward clean renders and away from artifacts.
pub struct NegativeGuidedPrior<'a> {
    pub prior: &'a ImagePrior,
    pub gamma: f64,
}

impl EpsPrior for NegativeGuidedPrior<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.prior.schedule
    }

    fn guided_eps(&self, x_t: &Tensor, t: usize, _noise: &Tensor) -> Result<Tensor> {
        let vc = self.prior.predict_v(x_t, t, CLEAN)?;
        let vn = if self.gamma == 1.0 { vc.clone() } else { self.prior.predict_v(x_t, t, ARTIFACT)? };
        guided_predict(x_t, &vc, &vn, t, self.gamma, &self.prior.schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdsConfig {
    pub gamma: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Camera jitter half-range in meters along world X and Y.
    pub translation: f64,
    /// Camera jitter half-range about the vertical, in degrees.
    pub yaw_degrees: f64,
    pub views: usize,
    pub steps: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            t_min: 20,
            t_max: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            translation: 3.0,
            yaw_degrees: 10.0,
            views: 1,
            steps: 200,
        }
    }
}

/// `pose` moved by up to `translation` m horizontally and turned by up to
/// `yaw_degrees` about the vertical through its center.
pub fn jitter_pose<R: Rng + ?Sized>(pose: &CameraPose, translation: f64, yaw_degrees: f64, rng: &mut R) -> CameraPose {
    let dx = rng.gen_range(-translation..=translation);
    let dy = rng.gen_range(-translation..=translation);
    let yaw = rng.gen_range(-yaw_degrees..=yaw_degrees).to_radians();
    let rz = rot_z(yaw);
    let r = pose.rotation;
    let rotation = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| rz[i][k] * r[k][j]).sum()));
    let t = pose.translation;
    CameraPose { rotation, translation: [t[0] + dx, t[1] + dy, t[2]], intrinsics: pose.intrinsics }
}

/// Score-distillation gradient on a grid tensor `[K, Z, X, Y]`: render jittered
/// views through the frozen scene autoencoder, noise them, and backpropagate
/// `σ_t²·(ε̂ - ε)` through the decoder and renderer into the grid.
pub fn sds_gradient<R: Rng + ?Sized>(
    scene_ae: &SceneAe,
    grid: &Tensor,
    base_poses: &[CameraPose],
    prior: &dyn EpsPrior,
    cfg: &SdsConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if base_poses.is_empty() || cfg.t_min > cfg.t_max || cfg.t_max >= prior.schedule().len() {
        return Err(NfError::InvalidArgument("sds needs poses and a valid timestep range".into()));
    }
    let factor = (scene_ae.world.image_size / scene_ae.render_size()) as f64;
    let poses: Vec<CameraPose> = (0..cfg.views.max(1))
        .map(|_| {
            let p = base_poses[rng.gen_range(0..base_poses.len())];
            let j = jitter_pose(&p, cfg.translation, cfg.yaw_degrees, rng);
            j.with_intrinsics(j.intrinsics.scaled(factor))
        })
        .collect();
    let mut g = Graph::new();
    g.freeze(&scene_ae.store);
    let gv = g.variable(grid.clone());
    let (rgb, _) = scene_ae.render_views(&mut g, gv, &poses)?;
    let x0 = to_signed(&g.tensor(rgb));
    let t = rng.gen_range(cfg.t_min..=cfg.t_max);
    let s = prior.schedule();
    let eps = randn_like(x0.shape(), rng);
    let xt = q_sample(&x0, t, &eps, s)?;
    let eps_hat = prior.guided_eps(&xt, t, &eps)?;
    if eps_hat.shape() != eps.shape() {
        return Err(NfError::InvalidArgument(format!(
            "prior predicted {:?} for renders {:?}",
            eps_hat.shape(),
            eps.shape()
        )));
    }
    let w = s.sigmas[t] * s.sigmas[t];
    // d x0 / d rgb = 2
    let image_grad = eps_hat.zip_map(&eps, |a, b| (2.0 * w * (a as f64 - b as f64)) as f32)?;
    let direction = g.constant(image_grad);
    let surrogate = g.mul(rgb, direction)?;
    let surrogate = g.sum(surrogate);
    let grads = g.backward(surrogate)?;
    Ok(grads.get(gv).expect("grid is a variable"))
}

/// Runs score distillation on a grid, keeping density non-negative.
pub fn sds_optimize<R: Rng + ?Sized>(
    scene_ae: &SceneAe,
    grid: &Tensor,
    base_poses: &[CameraPose],
    prior: &dyn EpsPrior,
    cfg: &SdsConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let id = store.add("grid", grid.clone());
    let mut adam = AdamState::new(
        &store,
        AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: 0.0 },
    )?;
    let nv: usize = grid.shape()[1..].iter().product();
    for _ in 0..cfg.steps {
        let grad = sds_gradient(scene_ae, store.get(id), base_poses, prior, cfg, rng)?;
        adam.step(&mut store, &[Some(grad)])?;
        if scene_ae.cfg.explicit_density {
            store.get_mut(id).data_mut()[..nv].iter_mut().for_each(|d| *d = d.max(0.0));
        }
    }
    Ok(store.get(id).clone())
}
