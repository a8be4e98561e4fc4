//! Posed-image encoder, occupancy-weighted frustums and mean-pool fusion into
//! density/feature voxel grids.

use std::sync::Arc;

use nfldm_tensor::nn::Conv2d;
use nfldm_tensor::{Graph, ParamStore, SparseMap, Tensor, Var};
use rand::Rng;

use crate::camera::{CameraPose, DepthBins, GridSpec};
use crate::io::Image;
use crate::{NfError, Result};

pub const DENSITY_LOGIT_CLAMP: f32 = 10.0;

/// Per-pixel features `φ: H×W×C` and densities `σ: H×W×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFieldMap {
    pub features: Tensor,
    pub densities: Tensor,
}

/// Graph handles for a batch of encoded images.
#[derive(Clone, Copy, Debug)]
pub struct PixelFieldVars {
    /// `[N, D, h, w]`, nonnegative.
    pub sigma: Var,
    /// `[N, C, h, w]`.
    pub phi: Var,
}

/// Clamp to `[-10, 10]`, then softplus.
pub fn density_activation(g: &mut Graph, logits: Var) -> Var {
    let c = g.clamp(logits, -DENSITY_LOGIT_CLAMP, DENSITY_LOGIT_CLAMP);
    g.softplus(c)
}

/// Small strided CNN predicting `D` density logits and `C` features per
/// output pixel. Two normalized pixel-coordinate channels are appended to
/// the RGB input.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    convs: Vec<Conv2d>,
    density_head: Conv2d,
    feature_head: Conv2d,
    pub depth_bins: usize,
    pub feature_channels: usize,
    pub downsample: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feature_channels: usize,
        depth_bins: usize,
        downsample: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !downsample.is_power_of_two() {
            return Err(NfError::InvalidArgument(format!("downsample {downsample} must be a power of two")));
        }
        let levels = downsample.trailing_zeros() as usize;
        let mut convs = vec![Conv2d::same3(store, &format!("{name}.conv0"), 5, width, rng)];
        for i in 0..levels {
            convs.push(Conv2d::new(store, &format!("{name}.down{i}"), width, width, 3, 2, 1, rng));
        }
        while convs.len() < 4 {
            let i = convs.len();
            convs.push(Conv2d::same3(store, &format!("{name}.conv{i}"), width, width, rng));
        }
        let density_head = Conv2d::same3(store, &format!("{name}.density"), width, depth_bins, rng);
        // start nearly transparent
        for v in store.get_mut(density_head.bias).data_mut() {
            *v = -3.0;
        }
        let feature_head = Conv2d::same3(store, &format!("{name}.feature"), width, feature_channels, rng);
        Ok(Self { convs, density_head, feature_head, depth_bins, feature_channels, downsample })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<PixelFieldVars> {
        let shape = g.shape(images).to_vec();
        let [n, 3, h, w] = shape[..] else {
            return Err(NfError::InvalidArgument(format!("encoder expects [N, 3, H, W], got {shape:?}")));
        };
        if h % self.downsample != 0 || w % self.downsample != 0 {
            return Err(NfError::InvalidArgument(format!(
                "image {w}x{h} not divisible by downsample factor {}",
                self.downsample
            )));
        }
        let coords = g.constant(coord_channels(n, h, w));
        let mut x = g.concat(&[images, coords], 1)?;
        for conv in &self.convs {
            x = conv.forward(g, store, x)?;
            x = g.silu(x);
        }
        let logits = self.density_head.forward(g, store, x)?;
        let sigma = density_activation(g, logits);
        let phi = self.feature_head.forward(g, store, x)?;
        Ok(PixelFieldVars { sigma, phi })
    }

    /// Encodes one image into channel-last maps.
    pub fn encode_image(&self, store: &ParamStore, image: &Image) -> Result<PixelFieldMap> {
        let mut g = Graph::new();
        g.freeze(store);
        let t = image.to_chw().reshape([1, 3, image.height, image.width])?;
        let x = g.constant(t);
        let out = self.forward(&mut g, store, x)?;
        let features = channels_last(&g.tensor(out.phi))?;
        let densities = channels_last(&g.tensor(out.sigma))?;
        Ok(PixelFieldMap { features, densities })
    }
}

fn coord_channels(n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([n, 2, h, w], |i| {
        let p = i % (h * w);
        let c = (i / (h * w)) % 2;
        let (y, x) = (p / w, p % w);
        if c == 0 {
            (y as f32 + 0.5) / h as f32 * 2.0 - 1.0
        } else {
            (x as f32 + 0.5) / w as f32 * 2.0 - 1.0
        }
    })
}

/// `[1, C, h, w]` to `[h, w, C]`.
fn channels_last(t: &Tensor) -> Result<Tensor> {
    let [1, c, h, w] = t.shape()[..] else {
        return Err(NfError::InvalidArgument(format!("expected a single image, got {:?}", t.shape())));
    };
    let d = t.data();
    Ok(Tensor::from_fn([h, w, c], |i| {
        let (p, ch) = (i / c, i % c);
        d[ch * h * w + p]
    }))
}

/// `O(d) = exp(-Σ_{j<d} σ_j δ_j) · (1 - exp(-σ_d δ_d))`.
pub fn occupancy_weights(sigma: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != deltas.len() {
        return Err(NfError::InvalidArgument(format!("{} densities vs {} deltas", sigma.len(), deltas.len())));
    }
    if sigma.iter().any(|&s| s < 0.0) {
        return Err(NfError::InvalidArgument("negative density".into()));
    }
    let mut acc = 0.0f64;
    Ok(sigma
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let o = (-acc).exp() * -(-s * d).exp_m1();
            acc += s * d;
            o
        })
        .collect())
}

/// Occupancy over the depth axis of `sigma: [N, D, h, w]`.
pub fn occupancy_graph(g: &mut Graph, sigma: Var, deltas: &[f64]) -> Result<Var> {
    let d = deltas.len();
    let delta = g.constant(Tensor::new([1, d, 1, 1], deltas.iter().map(|&v| v as f32).collect())?);
    let sd = g.mul(sigma, delta)?;
    let cum = g.cumsum(sd, 1, true)?;
    let neg = g.neg(cum);
    let trans = g.exp(neg);
    let nsd = g.neg(sd);
    let e = g.exp(nsd);
    let alpha = g.neg(e);
    let alpha = g.add_scalar(alpha, 1.0);
    Ok(g.mul(trans, alpha)?)
}

/// Frustum entries `[1 + C, E]` ordered `(view, depth, row, col)`: density in
/// channel 0, occupancy-scaled features after it.
pub fn frustum_entries(g: &mut Graph, fields: PixelFieldVars, deltas: &[f64]) -> Result<Var> {
    let occ = occupancy_graph(g, fields.sigma, deltas)?;
    let [n, d, h, w] = g.shape(occ)[..] else { unreachable!("occupancy keeps rank 4") };
    let c = g.shape(fields.phi)[1];
    let occ5 = g.reshape(occ, &[n, 1, d, h, w])?;
    let phi5 = g.reshape(fields.phi, &[n, c, 1, h, w])?;
    let feat = g.mul(occ5, phi5)?;
    let feat = g.permute(feat, &[1, 0, 2, 3, 4])?;
    let feat = g.reshape(feat, &[c, n * d * h * w])?;
    let dens = g.reshape(fields.sigma, &[1, n * d * h * w])?;
    Ok(g.concat(&[dens, feat], 0)?)
}

/// `F(h, w, d) = [O(h, w, d)·φ(h, w), σ(h, w, d)]` as an `H×W×D×(C+1)` tensor.
#[derive(Clone, Debug)]
pub struct Frustum {
    pub entries: Tensor,
    pub bins: DepthBins,
    /// Pose with intrinsics at the frustum's resolution.
    pub pose: CameraPose,
}

pub fn build_frustum(map: &PixelFieldMap, bins: &DepthBins, pose: &CameraPose) -> Result<Frustum> {
    let [h, w, c] = map.features.shape()[..] else {
        return Err(NfError::InvalidArgument("features must be H×W×C".into()));
    };
    if map.densities.shape() != [h, w, bins.len()] {
        return Err(NfError::InvalidArgument(format!(
            "densities {:?} inconsistent with {h}x{w} and {} bins",
            map.densities.shape(),
            bins.len()
        )));
    }
    let d = bins.len();
    let mut entries = Vec::with_capacity(h * w * d * (c + 1));
    for p in 0..h * w {
        let sigma: Vec<f64> = map.densities.data()[p * d..(p + 1) * d].iter().map(|&v| v as f64).collect();
        let occ = occupancy_weights(&sigma, bins.deltas())?;
        let phi = &map.features.data()[p * c..(p + 1) * c];
        for k in 0..d {
            entries.extend(phi.iter().map(|&f| (occ[k] * f as f64) as f32));
            entries.push(sigma[k] as f32);
        }
    }
    Ok(Frustum { entries: Tensor::new([h, w, d, c + 1], entries)?, bins: bins.clone(), pose: *pose })
}

/// Density `[Z, X, Y]` and feature `[C, Z, X, Y]` grids over a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub density: Tensor,
    pub feature: Tensor,
    pub spec: GridSpec,
    /// Voxels that received at least one frustum entry.
    pub fill_mask: Vec<bool>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        let [z, x, y] = spec.dims;
        Self {
            density: Tensor::zeros([z, x, y]),
            feature: Tensor::zeros([channels, z, x, y]),
            spec,
            fill_mask: vec![false; spec.num_voxels()],
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.feature.shape()[0]
    }

    /// `[1 + C, Z, X, Y]` with density first.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.density.data().to_vec();
        data.extend_from_slice(self.feature.data());
        let [z, x, y] = self.spec.dims;
        Tensor::new([1 + self.feature_channels(), z, x, y], data).expect("consistent grid")
    }

    pub fn from_tensor(t: &Tensor, spec: GridSpec, fill_mask: Vec<bool>) -> Result<Self> {
        let [z, x, y] = spec.dims;
        let shape = t.shape();
        if shape.len() != 4 || shape[1..] != [z, x, y] || shape[0] < 1 || fill_mask.len() != z * x * y {
            return Err(NfError::InvalidArgument(format!("grid tensor {shape:?} does not match {:?}", spec.dims)));
        }
        let v = z * x * y;
        Ok(Self {
            density: Tensor::new([z, x, y], t.data()[..v].to_vec())?,
            feature: Tensor::new([shape[0] - 1, z, x, y], t.data()[v..].to_vec())?,
            spec,
            fill_mask,
        })
    }
}

/// Precomputed binning of frustum entries into voxels: a sparse mean-pool map
/// plus the fill mask.
#[derive(Clone, Debug)]
pub struct FusionPlan {
    pub map: Arc<SparseMap>,
    pub fill_mask: Vec<bool>,
    /// Entries that landed outside the lattice.
    pub dropped: usize,
    pub spec: GridSpec,
}

impl FusionPlan {
    /// Entries ordered `(view, depth, row, col)` for `h × w` frustums whose
    /// poses carry intrinsics at that resolution.
    pub fn new(poses: &[CameraPose], h: usize, w: usize, bins: &DepthBins, spec: &GridSpec) -> Result<Self> {
        let nv = spec.num_voxels();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); nv];
        let mut dropped = 0;
        let mut e = 0;
        for pose in poses {
            for &depth in bins.depths() {
                for y in 0..h {
                    for x in 0..w {
                        let p = pose.lift_pixel(x as f64 + 0.5, y as f64 + 0.5, depth)?;
                        match spec.world_to_voxel(p) {
                            Some(idx) => members[spec.flat_index(idx)].push(e),
                            None => dropped += 1,
                        }
                        e += 1;
                    }
                }
            }
        }
        let mut map = SparseMap::new(e);
        let mut fill_mask = vec![false; nv];
        for (v, m) in members.iter().enumerate() {
            fill_mask[v] = !m.is_empty();
            let wgt = 1.0 / m.len().max(1) as f32;
            map.push_row(m.iter().map(|&i| (i, wgt)));
        }
        if dropped == e {
            log::warn!("every frustum entry fell outside the grid");
        }
        Ok(Self { map: Arc::new(map), fill_mask, dropped, spec: *spec })
    }

    /// `[K, E]` entries to a `[K, Z, X, Y]` grid.
    pub fn apply(&self, g: &mut Graph, entries: Var) -> Result<Var> {
        let k = g.shape(entries)[0];
        let v = g.sparse_apply(entries, self.map.clone())?;
        let [z, x, y] = self.spec.dims;
        Ok(g.reshape(v, &[k, z, x, y])?)
    }
}

/// Mean-pools every frustum entry into the voxel containing its world point.
pub fn fuse_frustums(frustums: &[Frustum], spec: &GridSpec) -> Result<VoxelGrid> {
    let Some(first) = frustums.first() else {
        return Err(NfError::InvalidArgument("no frustums to fuse".into()));
    };
    let c = first.entries.shape()[3] - 1;
    let nv = spec.num_voxels();
    let mut sums = vec![0.0f64; nv * (c + 1)];
    let mut counts = vec![0usize; nv];
    for f in frustums {
        let [h, w, d, cc] = f.entries.shape()[..] else {
            return Err(NfError::InvalidArgument("frustum entries must be rank 4".into()));
        };
        if cc != c + 1 || d != f.bins.len() {
            return Err(NfError::InvalidArgument("frustums disagree in channel count".into()));
        }
        for y in 0..h {
            for x in 0..w {
                for (k, &depth) in f.bins.depths().iter().enumerate() {
                    let p = f.pose.lift_pixel(x as f64 + 0.5, y as f64 + 0.5, depth)?;
                    let Some(idx) = spec.world_to_voxel(p) else { continue };
                    let v = spec.flat_index(idx);
                    let src = &f.entries.data()[((y * w + x) * d + k) * cc..][..cc];
                    counts[v] += 1;
                    sums[v * (c + 1)] += src[c] as f64;
                    for ch in 0..c {
                        sums[v * (c + 1) + 1 + ch] += src[ch] as f64;
                    }
                }
            }
        }
    }
    if counts.iter().all(|&n| n == 0) {
        log::warn!("every frustum entry fell outside the grid");
    }
    let mut grid = VoxelGrid::empty(*spec, c);
    for v in 0..nv {
        if counts[v] == 0 {
            continue;
        }
        grid.fill_mask[v] = true;
        let n = counts[v] as f64;
        grid.density.data_mut()[v] = (sums[v * (c + 1)] / n) as f32;
        for ch in 0..c {
            grid.feature.data_mut()[ch * nv + v] = (sums[v * (c + 1) + 1 + ch] / n) as f32;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::rng::seeded;

    #[test]
    fn occupancy_hand_cases() {
        assert_eq!(occupancy_weights(&[0.0; 3], &[1.0; 3]).unwrap(), vec![0.0; 3]);
        let ln2 = std::f64::consts::LN_2;
        let o = occupancy_weights(&[ln2, ln2], &[1.0, 1.0]).unwrap();
        assert!((o[0] - 0.5).abs() < 1e-12 && (o[1] - 0.25).abs() < 1e-12);
        let o = occupancy_weights(&[1.0], &[1.0]).unwrap();
        assert!((o[0] - 0.632_120_558_8).abs() < 1e-9);
        assert!(occupancy_weights(&[-1.0], &[1.0]).is_err());
    }

    #[test]
    fn occupancy_is_monotone_in_prefix_density() {
        let mut rng = seeded(2);
        for _ in 0..200 {
            let sigma: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            let deltas = vec![0.5; 6];
            let base = occupancy_weights(&sigma, &deltas).unwrap();
            let mut more = sigma.clone();
            more[1] += 0.3;
            let bumped = occupancy_weights(&more, &deltas).unwrap();
            for d in 2..6 {
                assert!(bumped[d] <= base[d] + 1e-15);
            }
        }
    }

    #[test]
    fn density_activation_clamps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2], vec![20.0, -20.0]).unwrap());
        let y = density_activation(&mut g, x);
        let v = g.value(y);
        assert!((v[0] as f64 - 10.000_045_4).abs() < 1e-5);
        assert!((v[1] as f64 - 4.54e-5).abs() < 1e-7 && v[1] > 0.0);
    }

    #[test]
    fn encoder_shapes() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "enc", 8, 8, 4, 16, &mut seeded(0)).unwrap();
        let img = Image::filled(32, 32, [0.2, 0.4, 0.6]);
        let map = enc.encode_image(&store, &img).unwrap();
        assert_eq!(map.features.shape(), &[8, 8, 8]);
        assert_eq!(map.densities.shape(), &[8, 8, 8]);
        assert!(map.densities.data().iter().all(|&s| s >= 0.0));
        assert!(enc.encode_image(&store, &Image::filled(30, 32, [0.0; 3])).is_err());
    }

    fn one_pixel_map(phi: f32, sigma: Vec<f32>) -> PixelFieldMap {
        let d = sigma.len();
        PixelFieldMap { features: Tensor::new([1, 1, 1], vec![phi]).unwrap(), densities: Tensor::new([1, 1, d], sigma).unwrap() }
    }

    fn axis_pose() -> CameraPose {
        let k = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.5, cy: 0.5 };
        CameraPose::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], k).unwrap()
    }

    #[test]
    fn frustum_entries_scale_features_by_occupancy() {
        let bins = DepthBins::from_depths(vec![1.0, 2.0]).unwrap();
        let ln2 = std::f32::consts::LN_2;
        let f = build_frustum(&one_pixel_map(2.0, vec![ln2, 0.0]), &bins, &axis_pose()).unwrap();
        assert_eq!(f.entries.shape(), &[1, 1, 2, 2]);
        let e = f.entries.data();
        assert!((e[0] - 1.0).abs() < 1e-6 && (e[1] - ln2).abs() < 1e-7);
        assert_eq!(&e[2..], &[0.0, 0.0]);
    }

    #[test]
    fn fusion_means_and_empty_cases() {
        let bins = DepthBins::from_depths(vec![1.2, 1.4]).unwrap();
        let spec = GridSpec::new([4, 4, 4], [1.0; 3], [-2.0, -2.0, 0.0]).unwrap();
        // both depths land in the same voxel (z in [1, 2))
        let f = build_frustum(&one_pixel_map(0.0, vec![1.0, 3.0]), &bins, &axis_pose()).unwrap();
        let grid = fuse_frustums(&[f.clone()], &spec).unwrap();
        let v = spec.flat_index(spec.world_to_voxel([0.0, 0.0, 1.3]).unwrap());
        assert!((grid.density.data()[v] - 2.0).abs() < 1e-6);
        assert_eq!(grid.fill_mask.iter().filter(|&&m| m).count(), 1);
        for (i, &m) in grid.fill_mask.iter().enumerate() {
            if !m {
                assert_eq!(grid.density.data()[i], 0.0);
            }
        }
        let far_spec = GridSpec::new([2, 2, 2], [1.0; 3], [100.0, 100.0, 100.0]).unwrap();
        let empty = fuse_frustums(&[f], &far_spec).unwrap();
        assert!(empty.fill_mask.iter().all(|&m| !m) && empty.density.sum() == 0.0);
    }

    #[test]
    fn graph_fusion_matches_direct_fusion_and_is_permutation_invariant() {
        let mut store = ParamStore::new();
        let mut rng = seeded(9);
        let enc = ImageEncoder::new(&mut store, "enc", 4, 6, 2, 8, &mut rng).unwrap();
        let spec = GridSpec::new([4, 8, 8], [0.5; 3], [-2.0, -2.0, -0.5]).unwrap();
        let bins = DepthBins::uniform(0.5, 3.0, 6).unwrap();
        let k = Intrinsics::from_fov(16, 16, 1.5).scaled(2.0);
        let poses: Vec<CameraPose> =
            (0..3).map(|i| CameraPose::from_yaw_pitch([0.0, 0.0, 1.0], i as f64 * 2.0, 0.3, k)).collect();
        let imgs: Vec<Image> = (0..3)
            .map(|_| Image::new(16, 16, (0..768).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let frustums: Vec<Frustum> = imgs
            .iter()
            .zip(&poses)
            .map(|(im, p)| build_frustum(&enc.encode_image(&store, im).unwrap(), &bins, p).unwrap())
            .collect();
        let direct = fuse_frustums(&frustums, &spec).unwrap();
        let mut rev = frustums.clone();
        rev.reverse();
        let reversed = fuse_frustums(&rev, &spec).unwrap();
        assert_eq!(direct.fill_mask, reversed.fill_mask);
        assert!(direct.to_tensor().sq_dist(&reversed.to_tensor()) < 1e-10);

        let mut g = Graph::new();
        let batch = Tensor::stack(&imgs.iter().map(Image::to_chw).collect::<Vec<_>>()).unwrap();
        let x = g.constant(batch);
        let fields = enc.forward(&mut g, &store, x).unwrap();
        let entries = frustum_entries(&mut g, fields, bins.deltas()).unwrap();
        let plan = FusionPlan::new(&poses, 8, 8, &bins, &spec).unwrap();
        let v = plan.apply(&mut g, entries).unwrap();
        assert_eq!(plan.fill_mask, direct.fill_mask);
        let diff = g.tensor(v).sq_dist(&direct.to_tensor());
        assert!(diff < 1e-8, "{diff}");
    }
}
