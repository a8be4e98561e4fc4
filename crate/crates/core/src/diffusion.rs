//! Variance-preserving diffusion over the latent hierarchy: schedule,
//! v-parameterized objective, DDPM/DDIM samplers and the ψ_g / ψ_c / ψ_f
//! denoisers with optional BEV conditioning.

use std::path::Path;

use nfldm_tensor::nn::{timestep_embedding_batch, AttnBlock, Conv2d, Linear, ResBlock, ResBlockOpts};
use nfldm_tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::lae::{LatentAe, LatentTriple};
use crate::rng::substream;
use crate::{NfError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub log_snr: Vec<f64>,
}

/// Linear betas; `alpha_t = sqrt(prod(1 - beta))`, `sigma_t = sqrt(1 - alpha_t^2)`.
pub fn make_vp_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(NfError::InvalidArgument(format!(
            "need T > 0 and 0 < beta_start < beta_end < 1, got T={t}, {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| if t == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64 })
        .collect();
    let mut abar = 1.0;
    let (mut alphas, mut sigmas, mut log_snr) = (Vec::with_capacity(t), Vec::with_capacity(t), Vec::with_capacity(t));
    for &b in &betas {
        abar *= 1.0 - b;
        alphas.push(abar.sqrt());
        sigmas.push((1.0 - abar).sqrt());
        log_snr.push((abar / (1.0 - abar)).ln());
    }
    Ok(NoiseSchedule { betas, alphas, sigmas, log_snr })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(NfError::InvalidArgument(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }
}

fn combine(a: &Tensor, b: &Tensor, wa: f64, wb: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(NfError::InvalidArgument(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.zip_map(b, |x, y| (wa * x as f64 + wb * y as f64) as f32)?)
}

/// `x_t = alpha_t x0 + sigma_t eps`
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    combine(x0, eps, s.alphas[t], s.sigmas[t])
}

/// `v = alpha_t eps - sigma_t x0`
pub fn v_target(x0: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    combine(eps, x0, s.alphas[t], -s.sigmas[t])
}

/// `x0 = alpha_t x_t - sigma_t v`
pub fn x0_from_v(x_t: &Tensor, v: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    combine(x_t, v, s.alphas[t], -s.sigmas[t])
}

/// `eps = sigma_t x_t + alpha_t v`
pub fn eps_from_v(x_t: &Tensor, v: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t)?;
    combine(x_t, v, s.sigmas[t], s.alphas[t])
}

pub fn randn_like<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// `n` timesteps evenly spread over `0..T`, ascending; all of them when `n == T`.
pub fn timestep_subset(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(NfError::InvalidArgument(format!("sampling steps {n} must be in 1..={total}")));
    }
    if n == 1 {
        return Ok(vec![total - 1]);
    }
    Ok((0..n).map(|i| ((i * (total - 1)) as f64 / (n - 1) as f64).round() as usize).collect())
}

/// A v-prediction for `x_t` at timestep `t`.
pub type VFn<'a> = dyn FnMut(&Tensor, usize) -> Result<Tensor> + 'a;

/// One DDIM move from `t` to `prev` (`None` = clean data) with stochasticity `eta`.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    v: &Tensor,
    t: usize,
    prev: Option<usize>,
    eta: f64,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let x0 = x0_from_v(x_t, v, t, s)?;
    let Some(p) = prev else { return Ok(x0) };
    let eps = eps_from_v(x_t, v, t, s)?;
    let (a_t, s_t, a_p, s_p) = (s.alphas[t], s.sigmas[t], s.alphas[p], s.sigmas[p]);
    let sig = eta * ((s_p * s_p) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_p * a_p))).max(0.0).sqrt();
    let dir = (s_p * s_p - sig * sig).max(0.0).sqrt();
    let mut out = combine(&x0, &eps, a_p, dir)?;
    if sig > 0.0 {
        for o in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *o = (*o as f64 + sig * z) as f32;
        }
    }
    Ok(out)
}

pub fn sample_ddim<R: Rng + ?Sized>(
    model: &mut VFn,
    s: &NoiseSchedule,
    shape: &[usize],
    n_steps: usize,
    eta: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let ts = timestep_subset(s.len(), n_steps)?;
    let mut x = randn_like(shape, rng);
    for i in (0..ts.len()).rev() {
        let v = model(&x, ts[i])?;
        let prev = if i == 0 { None } else { Some(ts[i - 1]) };
        x = ddim_step(&x, &v, ts[i], prev, eta, s, rng)?;
    }
    Ok(x)
}

/// Ancestral sampling through every timestep with the posterior variance.
pub fn sample_ddpm<R: Rng + ?Sized>(model: &mut VFn, s: &NoiseSchedule, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let mut x = randn_like(shape, rng);
    for t in (0..s.len()).rev() {
        let v = model(&x, t)?;
        let x0 = x0_from_v(&x, &v, t, s)?;
        if t == 0 {
            return Ok(x0);
        }
        let abar_t = s.alphas[t] * s.alphas[t];
        let abar_p = s.alphas[t - 1] * s.alphas[t - 1];
        let beta = s.betas[t];
        let c0 = abar_p.sqrt() * beta / (1.0 - abar_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - abar_p) / (1.0 - abar_t);
        let var = (1.0 - abar_p) / (1.0 - abar_t) * beta;
        let mut mean = combine(&x0, &x, c0, ct)?;
        for m in mean.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *m = (*m as f64 + var.sqrt() * z) as f32;
        }
        x = mean;
    }
    Ok(x)
}

/// Exact v-prediction for data distributed elementwise as `N(mean, std^2)`.
pub fn gaussian_oracle(mean: f64, std: f64, s: &NoiseSchedule) -> impl FnMut(&Tensor, usize) -> Result<Tensor> + '_ {
    move |x: &Tensor, t: usize| {
        let (a, sg) = (s.alphas[t], s.sigmas[t]);
        let var = std * std;
        let gain = a * var / (a * a * var + sg * sg);
        Ok(x.map(|xt| {
            let x0 = mean + gain * (xt as f64 - a * mean);
            ((a * xt as f64 - x0) / sg) as f32
        }))
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and its 5% critical value.
pub fn ks_two_sample(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut a: Vec<f32> = a.to_vec();
    let mut b: Vec<f32> = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let crit = 1.358 * ((n + m) as f64 / (n * m) as f64).sqrt();
    (d, crit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub eta: f64,
    pub g_hidden: usize,
    pub g_blocks: usize,
    pub unet_width: usize,
    pub groups: usize,
    pub temb_dim: usize,
    pub use_bev: bool,
    /// Probability of dropping the BEV condition during training.
    pub cond_dropout: f64,
    pub batch: usize,
    pub lr: f32,
    pub steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 250,
            eta: 0.0,
            g_hidden: 256,
            g_blocks: 6,
            unet_width: 32,
            groups: 8,
            temb_dim: 64,
            use_bev: true,
            cond_dropout: 0.1,
            batch: 8,
            lr: 1e-3,
            steps: 1500,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, msg: String| Err(NfError::Config { section: "diffusion".into(), field: field.into(), msg });
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad("beta_start", "need 0 < beta_start < beta_end < 1".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return bad("sample_steps", format!("must be in 1..={}", self.timesteps));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta", "must be in [0, 1]".into());
        }
        if self.unet_width % self.groups != 0 || self.temb_dim % 2 != 0 {
            return bad("unet_width", "width must divide into groups and temb_dim must be even".into());
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return bad("batch", "batch and lr must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_vp_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Sinusoidal embedding followed by a two-layer MLP.
#[derive(Clone, Debug)]
struct TimeEmbed {
    l1: Linear,
    l2: Linear,
    dim: usize,
}

impl TimeEmbed {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), dim, dim, rng),
            l2: Linear::new(store, &format!("{name}.l2"), dim, dim, rng),
            dim,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, ts: &[usize]) -> Result<Var> {
        let e = g.constant(timestep_embedding_batch(ts, self.dim)?);
        let h = self.l1.forward(g, store, e)?;
        let h = g.silu(h);
        Ok(self.l2.forward(g, store, h)?)
    }
}

/// Residual MLP over vectors: `h + W2 silu(W1 silu(h) + proj(temb))`.
#[derive(Clone, Debug)]
pub struct LinearDenoiser {
    time: TimeEmbed,
    input: Linear,
    blocks: Vec<(Linear, Linear, Linear)>,
    output: Linear,
    cond: Option<Linear>,
    pub dim: usize,
}

impl LinearDenoiser {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &DiffusionConfig,
        cond_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let h = cfg.g_hidden;
        let blocks = (0..cfg.g_blocks)
            .map(|i| {
                (
                    Linear::new(store, &format!("{name}.block{i}.l1"), h, h, rng),
                    Linear::new(store, &format!("{name}.block{i}.temb"), cfg.temb_dim, h, rng),
                    Linear::new(store, &format!("{name}.block{i}.l2"), h, h, rng),
                )
            })
            .collect();
        Self {
            time: TimeEmbed::new(store, &format!("{name}.time"), cfg.temb_dim, rng),
            input: Linear::new(store, &format!("{name}.input"), dim, h, rng),
            blocks,
            output: Linear::constant(store, &format!("{name}.output"), h, dim, 0.0),
            cond: cond_dim.map(|d| Linear::new(store, &format!("{name}.cond"), d, cfg.temb_dim, rng)),
            dim,
        }
    }

    /// `x: [N, dim]`, `cond: [N, cond_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ts: &[usize], cond: Option<Var>) -> Result<Var> {
        let mut temb = self.time.forward(g, store, ts)?;
        if let (Some(proj), Some(c)) = (&self.cond, cond) {
            let e = proj.forward(g, store, c)?;
            temb = g.add(temb, e)?;
        }
        let temb = g.silu(temb);
        let mut h = self.input.forward(g, store, x)?;
        for (l1, lt, l2) in &self.blocks {
            let a = g.silu(h);
            let a = l1.forward(g, store, a)?;
            let e = lt.forward(g, store, temb)?;
            let a = g.add(a, e)?;
            let a = g.silu(a);
            let a = l2.forward(g, store, a)?;
            h = g.add(h, a)?;
        }
        let h = g.silu(h);
        Ok(self.output.forward(g, store, h)?)
    }
}

/// Two-level U-net with a (cross-)attention bottleneck.
#[derive(Clone, Debug)]
pub struct UNet2d {
    time: TimeEmbed,
    cond: Option<Linear>,
    conv_in: Conv2d,
    rb1: ResBlock,
    down: Conv2d,
    rb2: ResBlock,
    attn: AttnBlock,
    rb3: ResBlock,
    rb4: ResBlock,
    conv_out: Conv2d,
    pub c_in: usize,
    pub c_out: usize,
}

impl UNet2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &DiffusionConfig,
        cond_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let w = cfg.unet_width;
        let opts = ResBlockOpts { groups: cfg.groups, temb_dim: Some(cfg.temb_dim), cond_dim: None };
        let n = |s: &str| format!("{name}.{s}");
        Self {
            time: TimeEmbed::new(store, &n("time"), cfg.temb_dim, rng),
            cond: cond_dim.map(|d| Linear::new(store, &n("cond"), d, cfg.temb_dim, rng)),
            conv_in: Conv2d::same3(store, &n("conv_in"), c_in, w, rng),
            rb1: ResBlock::new(store, &n("rb1"), w, w, opts, rng),
            down: Conv2d::new(store, &n("down"), w, w, 3, 2, 1, rng),
            rb2: ResBlock::new(store, &n("rb2"), w, w, opts, rng),
            attn: AttnBlock::new(store, &n("attn"), w, cfg.groups, Some(w), rng),
            rb3: ResBlock::new(store, &n("rb3"), w, w, opts, rng),
            rb4: ResBlock::new(store, &n("rb4"), 2 * w, w, opts, rng),
            conv_out: Conv2d::same3(store, &n("conv_out"), w, c_out, rng).scale_init(store, 0.0),
            c_in,
            c_out,
        }
    }

    /// `x: [N, c_in, H, W]`, `cond: [N, cond_dim]`, `ctx: [N, L, width]` tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ts: &[usize],
        cond: Option<Var>,
        ctx: Option<Var>,
    ) -> Result<Var> {
        let mut temb = self.time.forward(g, store, ts)?;
        if let (Some(proj), Some(c)) = (&self.cond, cond) {
            let e = proj.forward(g, store, c)?;
            temb = g.add(temb, e)?;
        }
        let h0 = self.conv_in.forward(g, store, x)?;
        let h1 = self.rb1.forward(g, store, h0, Some(temb), None)?;
        let d = self.down.forward(g, store, h1)?;
        let d = self.rb2.forward(g, store, d, Some(temb), None)?;
        let d = self.attn.forward(g, store, d, ctx)?;
        let d = self.rb3.forward(g, store, d, Some(temb), None)?;
        let u = g.upsample_nearest(d, 2)?;
        let u = g.concat(&[u, h1], 1)?;
        let u = self.rb4.forward(g, store, u, Some(temb), None)?;
        let u = g.silu(u);
        Ok(self.conv_out.forward(g, store, u)?)
    }
}

/// BEV one-hot `[N, 3, X, Y]` to tokens `[N, X·Y/16, width]`.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    c1: Conv2d,
    c2: Conv2d,
    pub width: usize,
}

impl BevEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.c1"), 3, width, 3, 2, 1, rng),
            c2: Conv2d::new(store, &format!("{name}.c2"), width, width, 3, 2, 1, rng),
            width,
        }
    }

    pub fn tokens(&self, g: &mut Graph, store: &ParamStore, bev: Var) -> Result<Var> {
        let h = self.c1.forward(g, store, bev)?;
        let h = g.silu(h);
        let h = self.c2.forward(g, store, h)?;
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        Ok(g.permute(h, &[0, 2, 1])?)
    }
}

/// Per-dimension (g) and per-channel (c, f) standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub g_mean: Vec<f32>,
    pub g_std: Vec<f32>,
    pub c_mean: Vec<f32>,
    pub c_std: Vec<f32>,
    pub f_mean: Vec<f32>,
    pub f_std: Vec<f32>,
}

fn channel_stats(ts: &[&Tensor]) -> (Vec<f32>, Vec<f32>) {
    let ch = ts[0].shape()[0];
    let per = ts[0].numel() / ch;
    let mut mean = vec![0.0f64; ch];
    let mut sq = vec![0.0f64; ch];
    for t in ts {
        for (i, &v) in t.data().iter().enumerate() {
            mean[i / per] += v as f64;
            sq[i / per] += (v as f64).powi(2);
        }
    }
    let n = (ts.len() * per) as f64;
    let m: Vec<f32> = mean.iter().map(|s| (s / n) as f32).collect();
    let sd = sq.iter().zip(&m).map(|(s, &mu)| ((s / n - (mu as f64).powi(2)).max(0.0).sqrt().max(1e-3)) as f32).collect();
    (m, sd)
}

fn apply_stats(t: &Tensor, mean: &[f32], std: &[f32], forward: bool) -> Tensor {
    let ch = mean.len();
    let per = t.numel() / ch.max(1);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / per) % ch;
        *v = if forward { (*v - mean[c]) / std[c] } else { *v * std[c] + mean[c] };
    }
    out
}

impl LatentStats {
    pub fn identity(g_dim: usize, c_ch: usize, f_ch: usize) -> Self {
        Self {
            g_mean: vec![0.0; g_dim],
            g_std: vec![1.0; g_dim],
            c_mean: vec![0.0; c_ch],
            c_std: vec![1.0; c_ch],
            f_mean: vec![0.0; f_ch],
            f_std: vec![1.0; f_ch],
        }
    }

    pub fn fit(latents: &[DiffusionSample]) -> Result<Self> {
        if latents.is_empty() {
            return Err(NfError::InvalidArgument("no latents to standardize".into()));
        }
        let gs: Vec<Tensor> = latents.iter().map(|l| Tensor::new([l.g.len(), 1], l.g.clone())).collect::<std::result::Result<_, _>>()?;
        let (g_mean, g_std) = channel_stats(&gs.iter().collect::<Vec<_>>());
        let (c_mean, c_std) = channel_stats(&latents.iter().map(|l| &l.c).collect::<Vec<_>>());
        let (f_mean, f_std) = channel_stats(&latents.iter().map(|l| &l.f).collect::<Vec<_>>());
        Ok(Self { g_mean, g_std, c_mean, c_std, f_mean, f_std })
    }

    pub fn normalize(&self, s: &DiffusionSample) -> DiffusionSample {
        DiffusionSample {
            g: s.g.iter().enumerate().map(|(i, v)| (v - self.g_mean[i]) / self.g_std[i]).collect(),
            c: apply_stats(&s.c, &self.c_mean, &self.c_std, true),
            f: apply_stats(&s.f, &self.f_mean, &self.f_std, true),
            bev: s.bev.clone(),
        }
    }

    pub fn denormalize(&self, s: &DiffusionSample) -> DiffusionSample {
        DiffusionSample {
            g: s.g.iter().enumerate().map(|(i, v)| v * self.g_std[i] + self.g_mean[i]).collect(),
            c: apply_stats(&s.c, &self.c_mean, &self.c_std, false),
            f: apply_stats(&s.f, &self.f_mean, &self.f_std, false),
            bev: s.bev.clone(),
        }
    }
}

/// One diffusion training example: `g` with its trajectory tail, the
/// Z-folded coarse latent `[L·Zc, Xc, Yc]`, the fine latent `[L, X, Y]`, and
/// an optional BEV one-hot `[3, X, Y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSample {
    pub g: Vec<f32>,
    pub c: Tensor,
    pub f: Tensor,
    pub bev: Option<Tensor>,
}

impl DiffusionSample {
    pub fn from_latents(lat: &LatentTriple, bev: Option<Tensor>) -> Result<Self> {
        let s = lat.c.shape();
        let mut g = lat.g.clone();
        g.extend_from_slice(&lat.trajectory);
        Ok(Self { g, c: lat.c.clone().reshape([s[0] * s[1], s[2], s[3]])?, f: lat.f.clone(), bev })
    }
}

/// Which level of the hierarchy a denoiser call is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Global,
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DdmLossReport {
    pub g: f32,
    pub c: f32,
    pub f: f32,
}

/// The three latent denoisers and their shared training state.
pub struct LatentDiffusion {
    pub cfg: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub psi_g: LinearDenoiser,
    pub psi_c: UNet2d,
    pub psi_f: UNet2d,
    pub bev: Option<BevEncoder>,
    pub stats: LatentStats,
    pub g_dim: usize,
    /// Z-folded `[L·Zc, Xc, Yc]`.
    pub c_shape: [usize; 3],
    pub f_shape: [usize; 3],
}

impl LatentDiffusion {
    pub fn new(cfg: DiffusionConfig, g_dim: usize, c_shape: [usize; 3], f_shape: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if f_shape[1] % c_shape[1] != 0 || f_shape[1] / c_shape[1] != f_shape[2] / c_shape[2] {
            return Err(NfError::InvalidArgument(format!("c {c_shape:?} does not tile f {f_shape:?}")));
        }
        let mut rng = substream(seed, "diffusion-init");
        let mut store = ParamStore::new();
        let r = &mut rng;
        let bev_dim = cfg.use_bev.then_some(cfg.unet_width);
        let psi_g = LinearDenoiser::new(&mut store, "psi_g", g_dim, &cfg, bev_dim, r);
        let psi_c = UNet2d::new(&mut store, "psi_c", c_shape[0], c_shape[0], &cfg, Some(g_dim), r);
        let psi_f = UNet2d::new(&mut store, "psi_f", f_shape[0] + c_shape[0], f_shape[0], &cfg, Some(g_dim), r);
        let bev = cfg.use_bev.then(|| BevEncoder::new(&mut store, "bev", cfg.unet_width, r));
        let schedule = cfg.schedule()?;
        let stats = LatentStats::identity(g_dim, c_shape[0], f_shape[0]);
        Ok(Self { cfg, schedule, store, psi_g, psi_c, psi_f, bev, stats, g_dim, c_shape, f_shape })
    }

    fn bev_context(&self, g: &mut Graph, bev: Option<&Tensor>) -> Result<Option<(Var, Var)>> {
        match (&self.bev, bev) {
            (Some(enc), Some(b)) => {
                let x = g.constant(b.clone());
                let tokens = enc.tokens(g, &self.store, x)?;
                let pooled = g.mean_axis(tokens, 1)?;
                let n = g.shape(tokens)[0];
                let pooled = g.reshape(pooled, &[n, enc.width])?;
                Ok(Some((tokens, pooled)))
            }
            _ => Ok(None),
        }
    }

    /// Nearest-neighbour upsampling of `c: [N, L·Zc, Xc, Yc]` to f's lattice.
    fn c_to_fine(&self, g: &mut Graph, c: Var) -> Result<Var> {
        Ok(g.upsample_nearest(c, self.f_shape[1] / self.c_shape[1])?)
    }

    /// v-prediction graph for one level. `cond_g` is the (standardized) global
    /// latent `[N, g_dim]`, `cond_c` the coarse latent, `bev` the one-hot maps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        level: Level,
        x_t: Var,
        ts: &[usize],
        cond_g: Option<Var>,
        cond_c: Option<Var>,
        bev: Option<&Tensor>,
    ) -> Result<Var> {
        let ctx = self.bev_context(g, bev)?;
        let s = &self.store;
        match level {
            Level::Global => self.psi_g.forward(g, s, x_t, ts, ctx.map(|c| c.1)),
            Level::Coarse => {
                let cg = cond_g.ok_or_else(|| NfError::InvalidArgument("ψ_c needs g".into()))?;
                self.psi_c.forward(g, s, x_t, ts, Some(cg), ctx.map(|c| c.0))
            }
            Level::Fine => {
                let cg = cond_g.ok_or_else(|| NfError::InvalidArgument("ψ_f needs g".into()))?;
                let cc = cond_c.ok_or_else(|| NfError::InvalidArgument("ψ_f needs c".into()))?;
                let up = self.c_to_fine(g, cc)?;
                let x = g.concat(&[x_t, up], 1)?;
                self.psi_f.forward(g, s, x, ts, Some(cg), ctx.map(|c| c.0))
            }
        }
    }

    /// Frozen-parameter v-prediction on tensors (batch in the first axis).
    pub fn predict_v(
        &self,
        level: Level,
        x_t: &Tensor,
        t: usize,
        cond_g: Option<&Tensor>,
        cond_c: Option<&Tensor>,
        bev: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let n = x_t.shape()[0];
        let x = g.constant(x_t.clone());
        let cg = cond_g.map(|t| g.constant(t.clone()));
        let cc = cond_c.map(|t| g.constant(t.clone()));
        let v = self.forward(&mut g, level, x, &vec![t; n], cg, cc, bev)?;
        Ok(g.tensor(v))
    }

    fn batch_shape(&self, level: Level, n: usize) -> Vec<usize> {
        match level {
            Level::Global => vec![n, self.g_dim],
            Level::Coarse => [&[n][..], &self.c_shape[..]].concat(),
            Level::Fine => [&[n][..], &self.f_shape[..]].concat(),
        }
    }

    /// The v-objective (`w = 1`) summed over the three levels for a batch of
    /// standardized samples, each level with its own timesteps and noise.
    pub fn ddm_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &[DiffusionSample],
        rng: &mut R,
    ) -> Result<(Var, DdmLossReport)> {
        let n = batch.len();
        let gx = Tensor::new([n, self.g_dim], batch.iter().flat_map(|b| b.g.clone()).collect())?;
        let cx = Tensor::stack(&batch.iter().map(|b| b.c.clone()).collect::<Vec<_>>())?;
        let fx = Tensor::stack(&batch.iter().map(|b| b.f.clone()).collect::<Vec<_>>())?;
        let bev = if self.bev.is_some() && batch.iter().all(|b| b.bev.is_some()) && rng.gen::<f64>() >= self.cfg.cond_dropout {
            Some(Tensor::stack(&batch.iter().map(|b| b.bev.clone().expect("checked")).collect::<Vec<_>>())?)
        } else {
            None
        };
        let cond_g = g.constant(gx.clone());
        let cond_c = g.constant(cx.clone());
        let mut losses = Vec::new();
        for (level, x0) in [(Level::Global, &gx), (Level::Coarse, &cx), (Level::Fine, &fx)] {
            let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.schedule.len())).collect();
            let eps = randn_like(x0.shape(), rng);
            let per = x0.numel() / n;
            let mut xt = vec![0.0; x0.numel()];
            let mut vt = vec![0.0; x0.numel()];
            for (i, &t) in ts.iter().enumerate() {
                let (a, s) = (self.schedule.alphas[t], self.schedule.sigmas[t]);
                for j in i * per..(i + 1) * per {
                    let (x, e) = (x0.data()[j] as f64, eps.data()[j] as f64);
                    xt[j] = (a * x + s * e) as f32;
                    vt[j] = (a * e - s * x) as f32;
                }
            }
            let xt = g.constant(Tensor::new(x0.shape().to_vec(), xt)?);
            let pred = self.forward(g, level, xt, &ts, Some(cond_g), Some(cond_c), bev.as_ref())?;
            let target = g.constant(Tensor::new(x0.shape().to_vec(), vt)?);
            let d = g.sub(pred, target)?;
            let d = g.square(d);
            losses.push(g.mean(d));
        }
        let report = DdmLossReport { g: g.item(losses[0]), c: g.item(losses[1]), f: g.item(losses[2]) };
        let total = g.add(losses[0], losses[1])?;
        let total = g.add(total, losses[2])?;
        Ok((total, report))
    }

    /// Fits standardization on `data` and trains all levels; returns per-step reports.
    pub fn train(&mut self, data: &[DiffusionSample], steps: usize, seed: u64) -> Result<Vec<DdmLossReport>> {
        self.stats = LatentStats::fit(data)?;
        let normed: Vec<DiffusionSample> = data.iter().map(|d| self.stats.normalize(d)).collect();
        let mut rng = substream(seed, "diffusion-train");
        let mut adam = AdamState::new(
            &self.store,
            AdamConfig { lr: self.cfg.lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 },
        )?;
        let mut out = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch: Vec<DiffusionSample> =
                (0..self.cfg.batch).map(|_| normed[rng.gen_range(0..normed.len())].clone()).collect();
            let mut g = Graph::new();
            let (loss, report) = self.ddm_loss(&mut g, &batch, &mut rng)?;
            let grads = g.backward(loss)?.for_store(&self.store);
            adam.step(&mut self.store, &grads)?;
            if step % 200 == 0 {
                log::info!("diffusion step {step}: {report:?}");
            }
            out.push(report);
        }
        Ok(out)
    }

    /// Samples `n` standardized latents level by level with DDIM.
    pub fn sample_normalized<R: Rng + ?Sized>(
        &self,
        n: usize,
        bev: Option<&Tensor>,
        steps: usize,
        eta: f64,
        rng: &mut R,
    ) -> Result<DiffusionSample> {
        let s = &self.schedule;
        let gs = sample_ddim(
            &mut |x: &Tensor, t| self.predict_v(Level::Global, x, t, None, None, bev),
            s,
            &self.batch_shape(Level::Global, n),
            steps,
            eta,
            rng,
        )?;
        let cs = sample_ddim(
            &mut |x: &Tensor, t| self.predict_v(Level::Coarse, x, t, Some(&gs), None, bev),
            s,
            &self.batch_shape(Level::Coarse, n),
            steps,
            eta,
            rng,
        )?;
        let fs = sample_ddim(
            &mut |x: &Tensor, t| self.predict_v(Level::Fine, x, t, Some(&gs), Some(&cs), bev),
            s,
            &self.batch_shape(Level::Fine, n),
            steps,
            eta,
            rng,
        )?;
        Ok(DiffusionSample { g: gs.into_data(), c: cs, f: fs, bev: bev.cloned() })
    }

    /// Full hierarchical sampling: `g` (with trajectory tail), then `c | g`,
    /// then `f | g, c`; `c` and `f` are snapped onto the LAE codebooks.
    pub fn sample_hierarchy(
        &self,
        lae: &LatentAe,
        n: usize,
        bev: Option<&Tensor>,
        seed: u64,
    ) -> Result<Vec<LatentTriple>> {
        let mut rng = substream(seed, "sample-hierarchy");
        if let Some(b) = bev {
            if b.shape()[0] != n {
                return Err(NfError::InvalidArgument(format!("{} BEV maps for {n} samples", b.shape()[0])));
            }
        }
        let raw = self.sample_normalized(n, bev, self.cfg.sample_steps, self.cfg.eta, &mut rng)?;
        self.to_latents(lae, &raw, n)
    }

    /// Splits a standardized batch into per-scene decoded-ready latents.
    pub fn to_latents(&self, lae: &LatentAe, raw: &DiffusionSample, n: usize) -> Result<Vec<LatentTriple>> {
        let gd = lae.cfg.global_dim;
        let cshape = lae.coarse_shape();
        let (cn, fnn) = (raw.c.numel() / n, raw.f.numel() / n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let one = DiffusionSample {
                g: raw.g[i * self.g_dim..(i + 1) * self.g_dim].to_vec(),
                c: Tensor::new(self.c_shape.to_vec(), raw.c.data()[i * cn..(i + 1) * cn].to_vec())?,
                f: Tensor::new(self.f_shape.to_vec(), raw.f.data()[i * fnn..(i + 1) * fnn].to_vec())?,
                bev: None,
            };
            let d = self.stats.denormalize(&one);
            let c = d.c.reshape(cshape)?;
            let (c, c_indices, f, f_indices) = lae.requantize(&c, &d.f)?;
            out.push(LatentTriple {
                g: d.g[..gd].to_vec(),
                trajectory: d.g[gd..].to_vec(),
                c,
                f,
                c_indices,
                f_indices,
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(path, self.store.iter())?;
        let stats = path.with_extension("stats.json");
        std::fs::write(stats, serde_json::to_string_pretty(&self.stats)?)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load_from(io::load_checkpoint(path)?)?;
        let stats = path.with_extension("stats.json");
        self.stats = serde_json::from_str(&std::fs::read_to_string(stats)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn schedule_closed_forms() {
        let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alphas[0] - (1.0f64 - 1e-4).sqrt()).abs() < 1e-15);
        assert!((s.sigmas[0] - 0.01).abs() < 1e-15);
        for t in 0..1000 {
            assert!((s.alphas[t].powi(2) + s.sigmas[t].powi(2) - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(s.log_snr[t] < s.log_snr[t - 1]);
            }
        }
        assert!(make_vp_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_vp_schedule(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn arithmetic_examples() {
        // a schedule whose t=0 has alpha = 0.8, sigma = 0.6
        let s = NoiseSchedule { betas: vec![0.36], alphas: vec![0.8], sigmas: vec![0.6], log_snr: vec![(0.64f64 / 0.36).ln()] };
        let x0 = Tensor::new([1], vec![1.0]).unwrap();
        let eps = Tensor::new([1], vec![0.5]).unwrap();
        assert!((q_sample(&x0, 0, &eps, &s).unwrap().data()[0] - 1.1).abs() < 1e-6);
        assert!((v_target(&x0, &eps, 0, &s).unwrap().data()[0] + 0.2).abs() < 1e-6);
        assert!(q_sample(&x0, 1, &eps, &s).is_err());
    }

    #[test]
    fn subset_spacing() {
        assert_eq!(timestep_subset(1000, 1000).unwrap(), (0..1000).collect::<Vec<_>>());
        let s = timestep_subset(1000, 50).unwrap();
        assert_eq!((s[0], s[49], s.len()), (0, 999, 50));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(timestep_subset(10, 11).is_err());
    }

    #[test]
    fn ddim_matches_shifted_gaussian() {
        let s = make_vp_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded(4);
        let mut oracle = gaussian_oracle(0.5, 0.5, &s);
        let x = sample_ddim(&mut oracle, &s, &[4000], 100, 0.0, &mut rng).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 4000.0;
        assert!((mean - 0.5).abs() < 0.03, "{mean}");
        assert!((var - 0.25).abs() < 0.03, "{var}");
    }

    #[test]
    fn ks_statistic_detects_shift() {
        let mut rng = seeded(1);
        let a: Vec<f32> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f32> = (0..1000).map(|_| rng.sample::<f32, _>(StandardNormal) + 0.5).collect();
        let (d, crit) = ks_two_sample(&a, &b);
        assert!(d > crit);
        let (d, crit) = ks_two_sample(&a, &a);
        assert!(d == 0.0 && crit > 0.0);
    }
}
