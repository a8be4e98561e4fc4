//! Trilinear grid sampling, volume rendering with expected depth, the
//! feature-to-RGB decoder and the scene-autoencoder loss.

use std::sync::Arc;

use nfldm_tensor::nn::{Conv2d, Linear};
use nfldm_tensor::{Graph, ParamStore, SparseMap, Tensor, Var};
use rand::Rng;

use crate::camera::{dot, CameraPose, GridSpec, Vec3};
use crate::scene_encoder::{density_activation, VoxelGrid};
use crate::{NfError, Result};

/// Coefficients of the depth and opacity-entropy terms (image term is 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneAeLossWeights {
    pub depth: f32,
    pub entropy: f32,
}

impl Default for SceneAeLossWeights {
    fn default() -> Self {
        Self { depth: 5.0, entropy: 0.01 }
    }
}
const WEIGHT_SUM_GUARD: f32 = 1e-6;

/// Trilinear interpolation terms `(flat voxel, weight)` over voxel centers;
/// empty outside the center hull.
pub fn trilinear_terms(spec: &GridSpec, p: Vec3) -> Vec<(usize, f32)> {
    let l = spec.to_lattice(p);
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = l[a] - 0.5;
        let n = spec.dims[a];
        if !(c >= 0.0 && c <= (n - 1) as f64) {
            return Vec::new();
        }
        let i = (c.floor() as usize).min(n.saturating_sub(2));
        base[a] = i;
        frac[a] = c - i as f64;
    }
    let mut terms = Vec::with_capacity(8);
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut wgt = 1.0f64;
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            if hi && spec.dims[a] == 1 {
                wgt = 0.0;
                break;
            }
            idx[a] = base[a] + hi as usize;
            wgt *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if wgt != 0.0 {
            terms.push((spec.flat_index(idx), wgt as f32));
        }
    }
    terms
}

/// Density and feature vector at a world point.
pub fn sample_trilinear(grid: &VoxelGrid, p: Vec3) -> (f32, Vec<f32>) {
    let c = grid.feature_channels();
    let nv = grid.spec.num_voxels();
    let mut density = 0.0;
    let mut feature = vec![0.0; c];
    for (v, w) in trilinear_terms(&grid.spec, p) {
        density += w * grid.density.data()[v];
        for (ch, f) in feature.iter_mut().enumerate() {
            *f += w * grid.feature.data()[ch * nv + v];
        }
    }
    (density, feature)
}

/// Rays through every pixel center of a `width × height` view with
/// `n_samples` midpoint samples between optical-axis depths `near` and `far`.
#[derive(Clone, Debug)]
pub struct RenderPlan {
    pub width: usize,
    pub height: usize,
    pub n_samples: usize,
    pub near: f32,
    pub far: f32,
    map: Arc<SparseMap>,
    /// `[R, S]` path length of each sample.
    deltas: Tensor,
    /// `[S]` optical-axis sample depths.
    depths: Tensor,
}

impl RenderPlan {
    pub fn new(
        pose: &CameraPose,
        width: usize,
        height: usize,
        n_samples: usize,
        near: f64,
        far: f64,
        spec: &GridSpec,
    ) -> Result<Self> {
        if n_samples < 2 || !(near < far) || near <= 0.0 {
            return Err(NfError::InvalidArgument(format!(
                "render needs n_samples >= 2 and 0 < near < far (got {n_samples}, {near}, {far})"
            )));
        }
        let step = (far - near) / n_samples as f64;
        let sample_depths: Vec<f64> = (0..n_samples).map(|k| near + (k as f64 + 0.5) * step).collect();
        let rays = width * height;
        let mut map = SparseMap::new(spec.num_voxels());
        let mut deltas = Vec::with_capacity(rays * n_samples);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
                let cam = pose.camera_dir(u, v);
                let stretch = dot(cam, cam).sqrt();
                for &d in &sample_depths {
                    let p = pose.lift_pixel(u, v, d)?;
                    map.push_row(trilinear_terms(spec, p));
                    deltas.push((step * stretch) as f32);
                }
            }
        }
        Ok(Self {
            width,
            height,
            n_samples,
            near: near as f32,
            far: far as f32,
            map: Arc::new(map),
            deltas: Tensor::new([rays, n_samples], deltas)?,
            depths: Tensor::new([1, n_samples], sample_depths.iter().map(|&d| d as f32).collect())?,
        })
    }

    pub fn rays(&self) -> usize {
        self.width * self.height
    }
}

/// Graph handles produced by [`render_graph`].
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[C, R]` composited features.
    pub features: Var,
    /// `[R]` expected optical-axis depth.
    pub depth: Var,
    /// `[R, S]` per-sample opacity weights.
    pub weights: Var,
    /// `[R]` transmittance past the last sample.
    pub background: Var,
}

/// How densities are obtained from the grid.
#[derive(Clone, Copy, Debug)]
pub enum DensitySource<'a> {
    /// Channel 0 holds density; the rest are features.
    Explicit,
    /// Every channel is a feature; density comes from a per-sample MLP.
    Implicit(&'a ImplicitDensity, &'a ParamStore),
}

/// Density inferred from sampled features: linear → SiLU → linear → clamp → softplus.
#[derive(Clone, Debug)]
pub struct ImplicitDensity {
    l1: Linear,
    l2: Linear,
}

impl ImplicitDensity {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), channels, hidden, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), hidden, 1, rng);
        for v in store.get_mut(l2.bias).data_mut() {
            *v = -3.0;
        }
        Self { l1, l2 }
    }

    /// `[N, C]` features to `[N, 1]` densities.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, feats)?;
        let h = g.silu(h);
        let s = self.l2.forward(g, store, h)?;
        Ok(density_activation(g, s))
    }
}

/// Volume-renders a `[K, Z, X, Y]` grid along the plan's rays.
pub fn render_graph(g: &mut Graph, grid: Var, plan: &RenderPlan, density: DensitySource) -> Result<RenderVars> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 4 || shape[1] * shape[2] * shape[3] != plan.map.n_in() {
        return Err(NfError::InvalidArgument(format!("grid {shape:?} does not match the render plan")));
    }
    let k = shape[0];
    let (r, s) = (plan.rays(), plan.n_samples);
    let flat = g.reshape(grid, &[k, plan.map.n_in()])?;
    let samples = g.sparse_apply(flat, plan.map.clone())?;
    let (sigma, feats) = match density {
        DensitySource::Explicit => {
            if k < 2 {
                return Err(NfError::InvalidArgument("explicit grids need density plus features".into()));
            }
            let sig = g.narrow(samples, 0, 0, 1)?;
            let sig = g.reshape(sig, &[r, s])?;
            let f = g.narrow(samples, 0, 1, k - 1)?;
            (g.relu(sig), g.reshape(f, &[k - 1, r, s])?)
        }
        DensitySource::Implicit(net, store) => {
            let t = g.transpose(samples)?;
            let sig = net.forward(g, store, t)?;
            (g.reshape(sig, &[r, s])?, g.reshape(samples, &[k, r, s])?)
        }
    };
    let deltas = g.constant(plan.deltas.clone());
    let sd = g.mul(sigma, deltas)?;
    let cum = g.cumsum(sd, 1, true)?;
    let ncum = g.neg(cum);
    let trans = g.exp(ncum);
    let nsd = g.neg(sd);
    let keep = g.exp(nsd);
    let alpha = g.neg(keep);
    let alpha = g.add_scalar(alpha, 1.0);
    let weights = g.mul(trans, alpha)?;
    let total = g.sum_axis(sd, 1)?;
    let ntotal = g.neg(total);
    let background = g.exp(ntotal);
    let background = g.reshape(background, &[r])?;

    let w3 = g.reshape(weights, &[1, r, s])?;
    let fw = g.mul(feats, w3)?;
    let features = g.sum_axis(fw, 2)?;
    let c = g.shape(features)[0];
    let features = g.reshape(features, &[c, r])?;

    let depths = g.constant(plan.depths.clone());
    let wd = g.mul(weights, depths)?;
    let num = g.sum_axis(wd, 1)?;
    let wsum = g.sum_axis(weights, 1)?;
    let wsum_v = g.value(wsum).to_vec();
    let guard = g.clamp(wsum, WEIGHT_SUM_GUARD, f32::INFINITY);
    let ratio = g.div(num, guard)?;
    let hit: Vec<f32> = wsum_v.iter().map(|&w| (w >= WEIGHT_SUM_GUARD) as u8 as f32).collect();
    let miss_far: Vec<f32> = hit.iter().map(|&h| (1.0 - h) * plan.far).collect();
    let hit = g.constant(Tensor::new([r, 1], hit)?);
    let miss_far = g.constant(Tensor::new([r, 1], miss_far)?);
    let depth = g.mul(ratio, hit)?;
    let depth = g.add(depth, miss_far)?;
    let depth = g.reshape(depth, &[r])?;
    Ok(RenderVars { features, depth, weights, background })
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// `[C, H, W]`.
    pub feature_map: Tensor,
    /// `[H, W]`.
    pub expected_depth: Tensor,
    /// `[H·W, S]`.
    pub sample_opacities: Tensor,
    /// `[H, W]`.
    pub background_transmittance: Tensor,
}

/// Renders at the resolution implied by the pose's principal point (`2·cx × 2·cy`).
pub fn render_rays(grid: &VoxelGrid, pose: &CameraPose, n_samples: usize, near: f64, far: f64) -> Result<RenderOutput> {
    let width = (2.0 * pose.intrinsics.cx).round() as usize;
    let height = (2.0 * pose.intrinsics.cy).round() as usize;
    let plan = RenderPlan::new(pose, width, height, n_samples, near, far, &grid.spec)?;
    let mut g = Graph::new();
    let v = g.constant(grid.to_tensor());
    let out = render_graph(&mut g, v, &plan, DensitySource::Explicit)?;
    let c = grid.feature_channels();
    Ok(RenderOutput {
        feature_map: g.tensor(out.features).reshape([c, height, width])?,
        expected_depth: g.tensor(out.depth).reshape([height, width])?,
        sample_opacities: g.tensor(out.weights),
        background_transmittance: g.tensor(out.background).reshape([height, width])?,
    })
}

/// Feature map `[N, C, h, w]` to RGB `[N, 3, 2h, 2w]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FeatureDecoder {
    conv_in: Conv2d,
    conv_mid: Conv2d,
    conv_up: Conv2d,
    conv_out: Conv2d,
    pub channels: usize,
}

impl FeatureDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, width: usize, rng: &mut R) -> Self {
        Self {
            conv_in: Conv2d::same3(store, &format!("{name}.conv_in"), channels, width, rng),
            conv_mid: Conv2d::same3(store, &format!("{name}.conv_mid"), width, width, rng),
            conv_up: Conv2d::same3(store, &format!("{name}.conv_up"), width, width, rng),
            conv_out: Conv2d::same3(store, &format!("{name}.conv_out"), width, 3, rng),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fmap: Var) -> Result<Var> {
        let shape = g.shape(fmap).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(NfError::InvalidArgument(format!(
                "decoder expects [N, {}, h, w], got {shape:?}",
                self.channels
            )));
        }
        let h = self.conv_in.forward(g, store, fmap)?;
        let h = g.silu(h);
        let m = self.conv_mid.forward(g, store, h)?;
        let m = g.silu(m);
        let h = g.add(h, m)?;
        let h = g.upsample_nearest(h, 2)?;
        let h = self.conv_up.forward(g, store, h)?;
        let h = g.silu(h);
        let o = self.conv_out.forward(g, store, h)?;
        Ok(g.sigmoid(o))
    }
}

/// Components of the scene-autoencoder objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneAeLossReport {
    pub image_recon: f32,
    pub depth_mse: f32,
    pub opacity_entropy: f32,
    pub total: f32,
}

/// Builds `1·L1 + w_depth·depth MSE (valid pixels only) + w_entropy·opacity
/// entropy`. `depth_valid` holds 1 where a depth measurement exists.
#[allow(clippy::too_many_arguments)]
pub fn scene_ae_loss(
    g: &mut Graph,
    weights: SceneAeLossWeights,
    pred: Var,
    target: Var,
    pred_depth: Var,
    target_depth: Var,
    depth_valid: Var,
    opacities: Var,
) -> Result<(Var, SceneAeLossReport)> {
    let diff = g.sub(pred, target)?;
    let ad = g.abs(diff);
    let image = g.mean(ad);

    let n_valid: f64 = g.value(depth_valid).iter().map(|&v| v as f64).sum();
    let dd = g.sub(pred_depth, target_depth)?;
    let sq = g.square(dd);
    let masked = g.mul(sq, depth_valid)?;
    let s = g.sum(masked);
    let depth = if n_valid > 0.0 {
        g.mul_scalar(s, (1.0 / n_valid) as f32)
    } else {
        log::warn!("no valid depth pixels; depth loss is zero");
        g.mul_scalar(s, 0.0)
    };

    let entropy = opacity_entropy(g, opacities);

    let wd = g.mul_scalar(depth, weights.depth);
    let we = g.mul_scalar(entropy, weights.entropy);
    let total = g.add(image, wd)?;
    let total = g.add(total, we)?;
    let report = SceneAeLossReport {
        image_recon: g.item(image),
        depth_mse: g.item(depth),
        opacity_entropy: g.item(entropy),
        total: g.item(total),
    };
    Ok((total, report))
}

/// Mean binary entropy (nats) of opacities clipped to `[1e-6, 1 - 1e-6]`.
pub fn opacity_entropy(g: &mut Graph, o: Var) -> Var {
    let o = g.clamp(o, 1e-6, 1.0 - 1e-6);
    let lo = g.log(o);
    let a = g.mul(o, lo).expect("same shape");
    let no = g.neg(o);
    let q = g.add_scalar(no, 1.0);
    let lq = g.log(q);
    let b = g.mul(q, lq).expect("same shape");
    let s = g.add(a, b).expect("same shape");
    let m = g.mean(s);
    g.neg(m)
}
