//! Latent voxel autoencoder: a fused grid `V` is compressed into a global
//! vector `g` (KL-regularized), a coarse 3D latent `c` and a fine 2D latent `f`
//! (both vector-quantized), and decoded back.

use std::path::Path;

use nfldm_tensor::nn::{Conv2d, Linear, ResBlock, ResBlockOpts};
use nfldm_tensor::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::rng::substream;
use crate::scene_ae::{PreparedScene, SceneAe};
use crate::{NfError, Result};

pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaeConfig {
    pub global_dim: usize,
    pub latent_channels: usize,
    /// Downsampling of `c` relative to `V` along every axis.
    pub downsample: usize,
    pub width: usize,
    pub groups: usize,
    pub coarse_codebook: usize,
    pub fine_codebook: usize,
    pub commitment: f32,
    pub density_weight: f32,
    pub kl_weight: f32,
    pub vq_weight: f32,
    pub image_weight: f32,
    /// Views rendered per step for the image term.
    pub image_views: usize,
    pub reseed_every: usize,
    pub lr: f32,
    /// Cosine decay floor as a fraction of `lr` over one `train` call; 1 keeps
    /// the rate constant.
    pub lr_min_scale: f32,
    pub steps: usize,
}

impl Default for LaeConfig {
    fn default() -> Self {
        Self {
            global_dim: 16,
            latent_channels: 4,
            downsample: 4,
            width: 32,
            groups: 8,
            coarse_codebook: 1024,
            fine_codebook: 128,
            commitment: 0.25,
            density_weight: 2.5,
            kl_weight: 2e-5,
            vq_weight: 1.0,
            image_weight: 10.0,
            image_views: 2,
            reseed_every: 500,
            lr: 1e-3,
            lr_min_scale: 1.0,
            steps: 1500,
        }
    }
}

impl LaeConfig {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let bad = |field: &str, msg: String| Err(NfError::Config { section: "lae".into(), field: field.into(), msg });
        if !self.downsample.is_power_of_two() || self.downsample < 2 || dims.iter().any(|d| d % self.downsample != 0) {
            return bad("downsample", format!("must be a power of two >= 2 dividing grid dims {dims:?}"));
        }
        if self.width % self.groups != 0 {
            return bad("width", format!("{} not divisible into {} groups", self.width, self.groups));
        }
        if self.global_dim == 0 || self.latent_channels == 0 {
            return bad("global_dim", "latent sizes must be positive".into());
        }
        if self.coarse_codebook == 0 || self.fine_codebook == 0 {
            return bad("coarse_codebook", "codebooks must be non-empty".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive".into());
        }
        if !(self.lr_min_scale > 0.0 && self.lr_min_scale <= 1.0) {
            return bad("lr_min_scale", "must be in (0, 1]".into());
        }
        Ok(())
    }
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal, summed.
pub fn kl_divergence(mu: &[f32], logvar: &[f32]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let lv = lv.clamp(LOGVAR_MIN, LOGVAR_MAX) as f64;
            0.5 * ((m as f64).powi(2) + lv.exp() - 1.0 - lv)
        })
        .sum()
}

fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu);
    let e = g.exp(logvar);
    let s = g.add(m2, e)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.sum(s);
    Ok(g.mul_scalar(s, 0.5))
}

/// Index of the codebook row nearest to `z` (squared L2; ties go to the lowest index).
pub fn nearest_code(book: &[f32], dim: usize, z: &[f32]) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (k, row) in book.chunks(dim).enumerate() {
        let d: f32 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

pub struct Quantized {
    /// Straight-through output: forward value equals the codebook rows,
    /// gradient flows to `z` unchanged.
    pub z_q: Var,
    pub indices: Vec<usize>,
    pub loss: Var,
}

/// Quantizes rows of `z: [M, D]` against `book: [K, D]` with the codebook and
/// commitment (β) terms, each a mean over elements.
pub fn vector_quantize(g: &mut Graph, z: Var, book: Var, beta: f32) -> Result<Quantized> {
    let zs = g.shape(z).to_vec();
    let bs = g.shape(book).to_vec();
    if zs.len() != 2 || bs.len() != 2 || zs[1] != bs[1] {
        return Err(NfError::InvalidArgument(format!("vector_quantize: z {zs:?} vs codebook {bs:?}")));
    }
    if bs[0] == 0 {
        return Err(NfError::InvalidArgument("empty codebook".into()));
    }
    let dim = zs[1];
    let zv = g.value(z).to_vec();
    let bv = g.value(book).to_vec();
    let indices: Vec<usize> = zv.chunks(dim).map(|row| nearest_code(&bv, dim, row)).collect();
    let picked = g.gather_rows(book, &indices)?;
    let zq_val = g.tensor(picked);

    let z_sg = g.constant(g.tensor(z));
    let d = g.sub(z_sg, picked)?;
    let d = g.square(d);
    let codebook_term = g.mean(d);
    let zq_sg = g.constant(zq_val.clone());
    let d = g.sub(z, zq_sg)?;
    let d = g.square(d);
    let commit = g.mean(d);
    let commit = g.mul_scalar(commit, beta);
    let loss = g.add(codebook_term, commit)?;

    let z_q = g.straight_through(z, &zq_val)?;
    Ok(Quantized { z_q, indices, loss })
}

#[derive(Clone, Debug)]
pub struct Codebook {
    pub param: ParamId,
    pub size: usize,
    pub dim: usize,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, size: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / size as f32;
        let param = store.add(name.to_string(), Tensor::rand_uniform([size, dim], -bound, bound, rng));
        Self { param, size, dim, usage: vec![0; size] }
    }

    pub fn entries<'a>(&self, store: &'a ParamStore) -> &'a [f32] {
        store.get(self.param).data()
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    /// Replaces entries unused since the last reseed with random `pool` vectors
    /// and resets the counters. Returns the number replaced.
    pub fn reseed_dead<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, pool: &[Vec<f32>], rng: &mut R) -> usize {
        let mut n = 0;
        if !pool.is_empty() {
            let data = store.get_mut(self.param).data_mut();
            for k in 0..self.size {
                if self.usage[k] == 0 {
                    let v = pool.choose(rng).expect("non-empty pool");
                    data[k * self.dim..(k + 1) * self.dim].copy_from_slice(v);
                    n += 1;
                }
            }
        }
        self.usage.iter_mut().for_each(|u| *u = 0);
        n
    }

    /// Snaps each `dim`-vector of `z` to its nearest entry.
    pub fn quantize_values(&self, store: &ParamStore, z: &[f32]) -> (Vec<f32>, Vec<usize>) {
        let book = self.entries(store);
        let idx: Vec<usize> = z.chunks(self.dim).map(|row| nearest_code(book, self.dim, row)).collect();
        let vals = idx.iter().flat_map(|&i| book[i * self.dim..(i + 1) * self.dim].to_vec()).collect();
        (vals, idx)
    }
}

/// The latent hierarchy of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTriple {
    pub g: Vec<f32>,
    pub trajectory: Vec<f32>,
    /// `[L, Zc, Xc, Yc]`
    pub c: Tensor,
    /// `[L, X, Y]`
    pub f: Tensor,
    pub c_indices: Vec<usize>,
    pub f_indices: Vec<usize>,
}

pub struct GlobalEncoding {
    pub mu: Var,
    pub logvar: Var,
    pub sample: Var,
}

/// Reports for one LAE step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LaeLossReport {
    pub voxel_recon: f32,
    pub kl: f32,
    pub vq: f32,
    pub image_recon: f32,
    pub total: f32,
}

pub struct LatentAe {
    pub cfg: LaeConfig,
    /// `[K, Z, X, Y]` of the grids it compresses.
    pub grid_shape: [usize; 4],
    pub store: ParamStore,
    g_convs: Vec<Conv2d>,
    g_mu: Linear,
    g_logvar: Linear,
    c_in: Conv2d,
    c_block: ResBlock,
    c_down: Vec<Conv2d>,
    c_out: Conv2d,
    f_in: Conv2d,
    f_block: ResBlock,
    f_down: Conv2d,
    f_mid: ResBlock,
    f_up: Conv2d,
    f_out: Conv2d,
    d_in: Conv2d,
    d_block: ResBlock,
    d_up: Vec<Conv2d>,
    d_combine: Conv2d,
    d_block2: ResBlock,
    d_out: Conv2d,
    pub coarse_book: Codebook,
    pub fine_book: Codebook,
}

/// Convolutions in the coarse encoder and decoder paths, whatever the
/// downsampling factor, so variants differ only in latent resolution.
const COARSE_STAGES: usize = 3;

impl LatentAe {
    pub fn new(cfg: LaeConfig, grid_shape: [usize; 4], seed: u64) -> Result<Self> {
        let [k, z, x, y] = grid_shape;
        cfg.validate([z, x, y])?;
        let mut rng = substream(seed, "lae-init");
        let mut s = ParamStore::new();
        let w = cfg.width;
        let l = cfg.latent_channels;
        let folded = k * z;
        let n_down = cfg.downsample.trailing_zeros() as usize;
        let zc = z / cfg.downsample;
        let plain = ResBlockOpts { groups: cfg.groups, temb_dim: None, cond_dim: None };
        let cgn = ResBlockOpts { groups: cfg.groups, temb_dim: None, cond_dim: Some(cfg.global_dim) };
        let r = &mut rng;
        let g_convs = vec![
            Conv2d::same3(&mut s, "enc_g.conv0", folded, w, r),
            Conv2d::new(&mut s, "enc_g.down0", w, w, 3, 2, 1, r),
            Conv2d::new(&mut s, "enc_g.down1", w, w, 3, 2, 1, r),
        ];
        let g_mu = Linear::new(&mut s, "enc_g.mu", w, cfg.global_dim, r);
        let g_logvar = Linear::constant(&mut s, "enc_g.logvar", w, cfg.global_dim, -4.0);
        let c_in = Conv2d::same3(&mut s, "enc_c.conv_in", folded, w, r);
        let c_block = ResBlock::new(&mut s, "enc_c.block", w, w, plain, r);
        let stages = n_down.max(COARSE_STAGES);
        let c_down = (0..stages)
            .map(|i| Conv2d::new(&mut s, &format!("enc_c.down{i}"), w, w, 3, if i < n_down { 2 } else { 1 }, 1, r))
            .collect();
        let c_out = Conv2d::same3(&mut s, "enc_c.conv_out", w, l * zc, r);
        let f_in = Conv2d::same3(&mut s, "enc_f.conv_in", folded, w, r);
        let f_block = ResBlock::new(&mut s, "enc_f.block", w, w, cgn, r);
        let f_down = Conv2d::new(&mut s, "enc_f.down", w, w, 3, 2, 1, r);
        let f_mid = ResBlock::new(&mut s, "enc_f.mid", w, w, cgn, r);
        let f_up = Conv2d::same3(&mut s, "enc_f.up", 2 * w, w, r);
        let f_out = Conv2d::same3(&mut s, "enc_f.conv_out", w, l, r);
        let d_in = Conv2d::same3(&mut s, "dec.conv_in", l * zc, w, r);
        let d_block = ResBlock::new(&mut s, "dec.block", w, w, cgn, r);
        let d_up = (0..stages).map(|i| Conv2d::same3(&mut s, &format!("dec.up{i}"), w, w, r)).collect();
        let d_combine = Conv2d::same3(&mut s, "dec.combine", w + l, w, r);
        let d_block2 = ResBlock::new(&mut s, "dec.block2", w, w, cgn, r);
        let d_out = Conv2d::same3(&mut s, "dec.conv_out", w, folded, r);
        let coarse_book = Codebook::new(&mut s, "codebook.c", cfg.coarse_codebook, l, r);
        let fine_book = Codebook::new(&mut s, "codebook.f", cfg.fine_codebook, l, r);
        Ok(Self {
            cfg,
            grid_shape,
            store: s,
            g_convs,
            g_mu,
            g_logvar,
            c_in,
            c_block,
            c_down,
            c_out,
            f_in,
            f_block,
            f_down,
            f_mid,
            f_up,
            f_out,
            d_in,
            d_block,
            d_up,
            d_combine,
            d_block2,
            d_out,
            coarse_book,
            fine_book,
        })
    }

    /// `[L, Zc, Xc, Yc]`
    pub fn coarse_shape(&self) -> [usize; 4] {
        let [_, z, x, y] = self.grid_shape;
        let ds = self.cfg.downsample;
        [self.cfg.latent_channels, z / ds, x / ds, y / ds]
    }

    /// `[L, X, Y]`
    pub fn fine_shape(&self) -> [usize; 3] {
        [self.cfg.latent_channels, self.grid_shape[2], self.grid_shape[3]]
    }

    fn check_grid(&self, g: &Graph, v: Var) -> Result<()> {
        if g.shape(v) != self.grid_shape {
            return Err(NfError::InvalidArgument(format!(
                "latent AE expects grid {:?}, got {:?}",
                self.grid_shape,
                g.shape(v)
            )));
        }
        Ok(())
    }

    /// `[K, Z, X, Y]` to `[1, K·Z, X, Y]`.
    fn fold(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let [k, z, x, y] = self.grid_shape;
        Ok(g.reshape(v, &[1, k * z, x, y])?)
    }

    pub fn encode_global<R: Rng + ?Sized>(&self, g: &mut Graph, v: Var, rng: &mut R) -> Result<GlobalEncoding> {
        self.check_grid(g, v)?;
        let s = &self.store;
        let mut h = self.fold(g, v)?;
        for conv in &self.g_convs {
            h = conv.forward(g, s, h)?;
            h = g.silu(h);
        }
        let shape = g.shape(h).to_vec();
        let h = g.reshape(h, &[1, shape[1], shape[2] * shape[3]])?;
        let pooled = g.mean_axis(h, 2)?;
        let pooled = g.reshape(pooled, &[1, shape[1]])?;
        let mu = self.g_mu.forward(g, s, pooled)?;
        let lv = self.g_logvar.forward(g, s, pooled)?;
        let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        let eps: Vec<f32> = (0..self.cfg.global_dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps = g.constant(Tensor::new([1, self.cfg.global_dim], eps)?);
        let half = g.mul_scalar(logvar, 0.5);
        let std = g.exp(half);
        let noise = g.mul(std, eps)?;
        let sample = g.add(mu, noise)?;
        Ok(GlobalEncoding { mu, logvar, sample })
    }

    /// Pre-quantization coarse latent `[1, L·Zc, Xc, Yc]`.
    pub fn encode_coarse(&self, g: &mut Graph, v: Var) -> Result<Var> {
        self.check_grid(g, v)?;
        let s = &self.store;
        let h = self.fold(g, v)?;
        let h = self.c_in.forward(g, s, h)?;
        let mut h = self.c_block.forward(g, s, h, None, None)?;
        for conv in &self.c_down {
            h = conv.forward(g, s, h)?;
            h = g.silu(h);
        }
        Ok(self.c_out.forward(g, s, h)?)
    }

    /// Pre-quantization fine latent `[1, L, X, Y]`, conditioned on `gvec: [1, G]`.
    pub fn encode_fine(&self, g: &mut Graph, v: Var, gvec: Var) -> Result<Var> {
        self.check_grid(g, v)?;
        let s = &self.store;
        let h = self.fold(g, v)?;
        let h = self.f_in.forward(g, s, h)?;
        let skip = self.f_block.forward(g, s, h, None, Some(gvec))?;
        let d = self.f_down.forward(g, s, skip)?;
        let d = g.silu(d);
        let d = self.f_mid.forward(g, s, d, None, Some(gvec))?;
        let u = g.upsample_nearest(d, 2)?;
        let u = g.concat(&[u, skip], 1)?;
        let u = self.f_up.forward(g, s, u)?;
        let u = g.silu(u);
        Ok(self.f_out.forward(g, s, u)?)
    }

    /// `[1, L·n, ...]` channel-first latent to `[n_vectors, L]` rows and back.
    fn to_rows(g: &mut Graph, z: Var, l: usize) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        let m = shape.iter().product::<usize>() / l;
        let r = g.reshape(z, &[l, m])?;
        Ok(g.transpose(r)?)
    }

    fn from_rows(g: &mut Graph, rows: Var, shape: &[usize]) -> Result<Var> {
        let t = g.transpose(rows)?;
        Ok(g.reshape(t, shape)?)
    }

    /// Quantizes a channel-first latent; returns the straight-through latent in
    /// the input shape, indices (spatial order) and the VQ loss.
    pub fn quantize(&self, g: &mut Graph, z: Var, book: &Codebook) -> Result<Quantized> {
        let shape = g.shape(z).to_vec();
        let l = self.cfg.latent_channels;
        let rows = Self::to_rows(g, z, l)?;
        let b = g.param(&self.store, book.param);
        let q = vector_quantize(g, rows, b, self.cfg.commitment)?;
        let z_q = Self::from_rows(g, q.z_q, &shape)?;
        Ok(Quantized { z_q, indices: q.indices, loss: q.loss })
    }

    /// Decodes `gvec: [1, G]`, `c: [1, L·Zc, Xc, Yc]`, `f: [1, L, X, Y]` to a
    /// `[K, Z, X, Y]` grid with non-negative density.
    pub fn decode_graph(&self, g: &mut Graph, gvec: Var, c: Var, f: Var) -> Result<Var> {
        let [k, z, x, y] = self.grid_shape;
        let [l, zc, xc, yc] = self.coarse_shape();
        if g.shape(c) != [1, l * zc, xc, yc] || g.shape(f) != [1, l, x, y] || g.shape(gvec) != [1, self.cfg.global_dim] {
            return Err(NfError::InvalidArgument(format!(
                "decode: g {:?}, c {:?}, f {:?} inconsistent with grid {:?}",
                g.shape(gvec),
                g.shape(c),
                g.shape(f),
                self.grid_shape
            )));
        }
        let s = &self.store;
        let h = self.d_in.forward(g, s, c)?;
        let mut h = self.d_block.forward(g, s, h, None, Some(gvec))?;
        let n_up = self.cfg.downsample.trailing_zeros() as usize;
        for (i, conv) in self.d_up.iter().enumerate() {
            if i < n_up {
                h = g.upsample_nearest(h, 2)?;
            }
            h = conv.forward(g, s, h)?;
            h = g.silu(h);
        }
        let h = g.concat(&[h, f], 1)?;
        let h = self.d_combine.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.d_block2.forward(g, s, h, None, Some(gvec))?;
        let out = self.d_out.forward(g, s, h)?;
        let out = g.reshape(out, &[k, z, x, y])?;
        let density = g.narrow(out, 0, 0, 1)?;
        let density = g.softplus(density);
        let feats = g.narrow(out, 0, 1, k - 1)?;
        Ok(g.concat(&[density, feats], 0)?)
    }

    /// Encodes a grid tensor `[K, Z, X, Y]` to quantized latents; `g` is the
    /// posterior mean.
    pub fn encode(&self, grid: &Tensor, trajectory: Vec<f32>) -> Result<LatentTriple> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let v = g.constant(grid.clone());
        let mut rng = substream(0, "lae-encode");
        let ge = self.encode_global(&mut g, v, &mut rng)?;
        let c = self.encode_coarse(&mut g, v)?;
        let f = self.encode_fine(&mut g, v, ge.mu)?;
        let c = Tensor::new(self.coarse_shape(), g.value(c).to_vec())?;
        let f = Tensor::new(self.fine_shape(), g.value(f).to_vec())?;
        let (c, c_indices, f, f_indices) = self.requantize(&c, &f)?;
        Ok(LatentTriple { g: g.value(ge.mu).to_vec(), trajectory, c, f, c_indices, f_indices })
    }

    /// Snaps (possibly sampled) continuous `c` and `f` onto their codebooks.
    pub fn requantize(&self, c: &Tensor, f: &Tensor) -> Result<(Tensor, Vec<usize>, Tensor, Vec<usize>)> {
        let rows = |t: &Tensor| -> Vec<f32> {
            let l = self.cfg.latent_channels;
            let m = t.numel() / l;
            (0..m).flat_map(|j| (0..l).map(move |ch| t.data()[ch * m + j])).collect()
        };
        let cols = |v: Vec<f32>, shape: Vec<usize>| -> Result<Tensor> {
            let l = self.cfg.latent_channels;
            let m = v.len() / l;
            Ok(Tensor::new(shape, (0..l).flat_map(|ch| (0..m).map(|j| v[j * l + ch]).collect::<Vec<_>>()).collect())?)
        };
        let (cv, ci) = self.coarse_book.quantize_values(&self.store, &rows(c));
        let (fv, fi) = self.fine_book.quantize_values(&self.store, &rows(f));
        Ok((cols(cv, c.shape().to_vec())?, ci, cols(fv, f.shape().to_vec())?, fi))
    }

    pub fn decode(&self, lat: &LatentTriple) -> Result<Tensor> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let [l, zc, xc, yc] = self.coarse_shape();
        let gv = g.constant(Tensor::new([1, self.cfg.global_dim], lat.g.clone())?);
        let c = g.constant(lat.c.clone().reshape([1, l * zc, xc, yc])?);
        let f = g.constant(lat.f.clone().reshape([1, l, self.grid_shape[2], self.grid_shape[3]])?);
        let v = self.decode_graph(&mut g, gv, c, f)?;
        Ok(g.tensor(v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(path, self.store.iter())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load_from(io::load_checkpoint(path)?)?;
        Ok(())
    }
}

/// Voxel reconstruction: per voxel `w_density·(Δdensity)² + mean_c (Δfeature_c)²`,
/// averaged separately over filled and empty voxels and the two means added.
pub fn voxel_recon_loss(g: &mut Graph, pred: Var, target: Var, fill_mask: &[bool], density_weight: f32) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(target) || shape.len() != 4 {
        return Err(NfError::InvalidArgument(format!("voxel loss {shape:?} vs {:?}", g.shape(target))));
    }
    let (k, nv) = (shape[0], shape[1] * shape[2] * shape[3]);
    if fill_mask.len() != nv {
        return Err(NfError::InvalidArgument(format!("fill mask of {} for {nv} voxels", fill_mask.len())));
    }
    let d = g.sub(pred, target)?;
    let d = g.square(d);
    let d = g.reshape(d, &[k, nv])?;
    let mut chan_w = vec![1.0 / (k - 1).max(1) as f32; k];
    chan_w[0] = density_weight;
    let w = g.constant(Tensor::new([k, 1], chan_w)?);
    let d = g.mul(d, w)?;
    let per_voxel = g.sum_axis(d, 0)?;
    let n_fill = fill_mask.iter().filter(|&&m| m).count();
    let mut terms = Vec::new();
    for (want, n) in [(true, n_fill), (false, nv - n_fill)] {
        if n == 0 {
            continue;
        }
        let m: Vec<f32> = fill_mask.iter().map(|&f| if f == want { 1.0 / n as f32 } else { 0.0 }).collect();
        let m = g.constant(Tensor::new([nv], m)?);
        let x = g.mul(per_voxel, m)?;
        terms.push(g.sum(x));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// One training example: a fused grid with its fill mask, plus the scene it
/// came from for the image term.
pub struct LaeSample<'a> {
    pub grid: Tensor,
    pub fill_mask: Vec<bool>,
    pub scene: &'a PreparedScene,
}

pub struct LaeTrainer<'a> {
    pub lae: LatentAe,
    pub scene_ae: &'a SceneAe,
    adam: AdamState,
    step: usize,
    pool_c: Vec<Vec<f32>>,
    pool_f: Vec<Vec<f32>>,
}

impl<'a> LaeTrainer<'a> {
    pub fn new(lae: LatentAe, scene_ae: &'a SceneAe) -> Result<Self> {
        let adam = AdamState::new(
            &lae.store,
            AdamConfig { lr: lae.cfg.lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 },
        )?;
        Ok(Self { lae, scene_ae, adam, step: 0, pool_c: Vec::new(), pool_f: Vec::new() })
    }

    /// Loss graph for one sample; `image` toggles the rendered-image term.
    pub fn loss<R: Rng>(&self, g: &mut Graph, sample: &LaeSample, image: bool, rng: &mut R) -> Result<(Var, LaeLossReport, Var, Var)> {
        let lae = &self.lae;
        let cfg = &lae.cfg;
        let v = g.constant(sample.grid.clone());
        let ge = lae.encode_global(g, v, rng)?;
        let c = lae.encode_coarse(g, v)?;
        let f = lae.encode_fine(g, v, ge.sample)?;
        let cq = lae.quantize(g, c, &lae.coarse_book)?;
        let fq = lae.quantize(g, f, &lae.fine_book)?;
        let recon = lae.decode_graph(g, ge.sample, cq.z_q, fq.z_q)?;
        let voxel = voxel_recon_loss(g, recon, v, &sample.fill_mask, cfg.density_weight)?;
        let kl = kl_graph(g, ge.mu, ge.logvar)?;
        let vq = g.add(cq.loss, fq.loss)?;
        let wkl = g.mul_scalar(kl, cfg.kl_weight);
        let wvq = g.mul_scalar(vq, cfg.vq_weight);
        let mut total = g.add(voxel, wkl)?;
        total = g.add(total, wvq)?;
        let mut image_val = 0.0;
        if image && cfg.image_weight > 0.0 && cfg.image_views > 0 {
            let scene = sample.scene;
            let views: Vec<usize> = (0..scene.images.len())
                .filter(|v| !scene.held_out_views.contains(v))
                .collect::<Vec<_>>()
                .choose_multiple(rng, cfg.image_views)
                .copied()
                .collect();
            let poses: Vec<_> = views.iter().map(|&v| scene.poses_lo[v]).collect();
            let (rgb, _) = self.scene_ae.render_views(g, recon, &poses)?;
            let target = g.constant(Tensor::stack(&views.iter().map(|&v| scene.images[v].clone()).collect::<Vec<_>>())?);
            let d = g.sub(rgb, target)?;
            let d = g.abs(d);
            let im = g.mean(d);
            image_val = g.item(im);
            let wim = g.mul_scalar(im, cfg.image_weight);
            total = g.add(total, wim)?;
        }
        let report = LaeLossReport {
            voxel_recon: g.item(voxel),
            kl: g.item(kl),
            vq: g.item(vq),
            image_recon: image_val,
            total: g.item(total),
        };
        Ok((total, report, c, f))
    }

    pub fn step<R: Rng>(&mut self, sample: &LaeSample, rng: &mut R) -> Result<LaeLossReport> {
        let mut g = Graph::new();
        g.freeze(&self.scene_ae.store);
        let (loss, report, c, f) = self.loss(&mut g, sample, true, rng)?;
        let l = self.lae.cfg.latent_channels;
        let cv = g.tensor(c);
        let fv = g.tensor(f);
        let grads = g.backward(loss)?;
        let grads = grads.for_store(&self.lae.store);
        self.adam.step(&mut self.lae.store, &grads)?;

        let (_, ci) = self.lae.coarse_book.quantize_values(&self.lae.store, &rows_of(&cv, l));
        let (_, fi) = self.lae.fine_book.quantize_values(&self.lae.store, &rows_of(&fv, l));
        self.lae.coarse_book.record(&ci);
        self.lae.fine_book.record(&fi);
        self.pool_c.extend(rows_of(&cv, l).chunks(l).map(<[f32]>::to_vec));
        self.pool_f.extend(rows_of(&fv, l).chunks(l).map(<[f32]>::to_vec));
        self.step += 1;
        if self.step % self.lae.cfg.reseed_every == 0 || self.step == 1 {
            let nc = self.lae.coarse_book.reseed_dead(&mut self.lae.store, &self.pool_c, rng);
            let nf = self.lae.fine_book.reseed_dead(&mut self.lae.store, &self.pool_f, rng);
            log::debug!("lae step {}: reseeded {nc} coarse / {nf} fine codes", self.step);
            self.pool_c.clear();
            self.pool_f.clear();
        }
        Ok(report)
    }

    /// Mean voxel reconstruction loss over `samples` without updating.
    pub fn eval_voxel_recon(&self, samples: &[LaeSample]) -> Result<f64> {
        let mut rng = substream(0, "lae-eval");
        let mut sum = 0.0;
        for s in samples {
            let mut g = Graph::new();
            g.freeze(&self.lae.store);
            let (_, r, _, _) = self.loss(&mut g, s, false, &mut rng)?;
            sum += r.voxel_recon as f64;
        }
        Ok(sum / samples.len().max(1) as f64)
    }

    pub fn train(&mut self, samples: &[LaeSample], steps: usize, seed: u64) -> Result<Vec<LaeLossReport>> {
        let mut rng = substream(seed, "lae-train");
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            if i % samples.len() == 0 {
                order.shuffle(&mut rng);
            }
            let p = i as f64 / steps as f64;
            let floor = self.lae.cfg.lr_min_scale as f64;
            let scale = floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
            self.adam.set_lr((self.lae.cfg.lr as f64 * scale) as f32);
            let r = self.step(&samples[order[i % samples.len()]], &mut rng)?;
            if i % 200 == 0 {
                log::info!("lae step {i}: {r:?}");
            }
            out.push(r);
        }
        Ok(out)
    }
}

/// Channel-first `[L, ...]` values as row-major `[n, L]` vectors.
fn rows_of(t: &Tensor, l: usize) -> Vec<f32> {
    let m = t.numel() / l;
    (0..m).flat_map(|j| (0..l).map(move |ch| t.data()[ch * m + j])).collect()
}
