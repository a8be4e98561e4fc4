//! The scene autoencoder: posed images → fused voxel grid → rendered images,
//! plus its training loop, per-scene voxel refinement and checkpoints.

use std::path::Path;

use nfldm_tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, DepthBins, GridSpec};
use crate::io::{self, Image};
use crate::metrics;
use crate::render::{
    render_graph, scene_ae_loss, DensitySource, FeatureDecoder, ImplicitDensity, RenderPlan, RenderVars,
    SceneAeLossReport, SceneAeLossWeights,
};
use crate::rng::substream;
use crate::scene_encoder::{frustum_entries, FusionPlan, ImageEncoder, VoxelGrid};
use crate::synthworld::{DatasetRecord, WorldConfig};
use crate::{NfError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneAeConfig {
    pub feature_channels: usize,
    pub depth_bins: usize,
    pub downsample: usize,
    pub encoder_width: usize,
    pub decoder_width: usize,
    pub frustum_near: f64,
    pub frustum_far: f64,
    pub render_samples: usize,
    pub render_near: f64,
    pub render_far: f64,
    pub explicit_density: bool,
    /// Trajectory frames whose views are encoded.
    pub input_frames: Vec<usize>,
    /// Frames never encoded, used for held-out evaluation.
    pub held_out_frames: Vec<usize>,
    /// Views rendered and supervised per training step.
    pub supervision_views: usize,
    pub depth_weight: f32,
    pub entropy_weight: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Cosine decay floor as a fraction of `lr`; 1 keeps the rate constant.
    pub lr_min_scale: f32,
    pub steps: usize,
    /// Per-scene voxel fine-tuning steps applied before latent encoding.
    pub refine_steps: usize,
    pub refine_lr: f32,
}

impl Default for SceneAeConfig {
    fn default() -> Self {
        Self {
            feature_channels: 8,
            depth_bins: 16,
            downsample: 2,
            encoder_width: 32,
            decoder_width: 32,
            frustum_near: 0.3,
            frustum_far: 6.5,
            render_samples: 32,
            render_near: 0.3,
            render_far: 8.0,
            explicit_density: true,
            input_frames: vec![0, 4, 8],
            held_out_frames: vec![2, 6],
            supervision_views: 4,
            depth_weight: 5.0,
            entropy_weight: 0.01,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            lr_min_scale: 1.0,
            steps: 3000,
            refine_steps: 60,
            refine_lr: 1e-2,
        }
    }
}

impl SceneAeConfig {
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(NfError::Config { section: "scene_ae".into(), field: field.into(), msg })
        };
        if !self.downsample.is_power_of_two() || world.image_size % self.downsample != 0 {
            return bad("downsample", format!("must be a power of two dividing image_size {}", world.image_size));
        }
        if world.image_size % 2 != 0 {
            return bad("downsample", "image_size must be even for the 2x decoder".into());
        }
        if self.depth_bins < 2 || !(self.frustum_near > 0.0 && self.frustum_far > self.frustum_near) {
            return bad("depth_bins", "need >= 2 bins and 0 < frustum_near < frustum_far".into());
        }
        if self.render_samples < 2 || !(self.render_near > 0.0 && self.render_far > self.render_near) {
            return bad("render_samples", "need >= 2 samples and 0 < render_near < render_far".into());
        }
        if self.input_frames.is_empty() || self.input_frames.iter().any(|&f| f >= world.n_frames) {
            return bad("input_frames", format!("frames must be in 0..{}", world.n_frames));
        }
        if self.held_out_frames.iter().any(|&f| f >= world.n_frames || self.input_frames.contains(&f)) {
            return bad("held_out_frames", "must be valid frames disjoint from input_frames".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive".into());
        }
        if !(self.lr_min_scale > 0.0 && self.lr_min_scale <= 1.0) {
            return bad("lr_min_scale", "must be in (0, 1]".into());
        }
        if self.feature_channels == 0 || self.supervision_views == 0 {
            return bad("feature_channels", "feature_channels and supervision_views must be positive".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> SceneAeLossWeights {
        SceneAeLossWeights { depth: self.depth_weight, entropy: self.entropy_weight }
    }
}

/// A scene prepared for the autoencoder: channel-first images, depths at the
/// render resolution, and the fusion plan of its input views.
pub struct PreparedScene {
    pub scene_id: u64,
    pub images: Vec<Tensor>,
    pub raw_images: Vec<Image>,
    /// `[R]` depth and validity at the render resolution, per view.
    pub depths: Vec<(Tensor, Tensor)>,
    /// Poses with intrinsics at the render resolution.
    pub poses_lo: Vec<CameraPose>,
    pub input_views: Vec<usize>,
    pub held_out_views: Vec<usize>,
    pub input_batch: Tensor,
    pub fusion: FusionPlan,
}

/// Encoder, decoder and (for the implicit variant) the density MLP, sharing one
/// parameter store.
pub struct SceneAe {
    pub cfg: SceneAeConfig,
    pub world: WorldConfig,
    pub store: ParamStore,
    pub encoder: ImageEncoder,
    pub decoder: FeatureDecoder,
    pub implicit: Option<ImplicitDensity>,
    pub bins: DepthBins,
    pub spec: GridSpec,
}

impl SceneAe {
    pub fn new(cfg: SceneAeConfig, world: WorldConfig, seed: u64) -> Result<Self> {
        world.validate()?;
        cfg.validate(&world)?;
        let mut rng = substream(seed, "scene-ae-init");
        let mut store = ParamStore::new();
        let c = cfg.feature_channels;
        let encoder =
            ImageEncoder::new(&mut store, "encoder", c, cfg.depth_bins, cfg.downsample, cfg.encoder_width, &mut rng)?;
        let decoder = FeatureDecoder::new(&mut store, "decoder", c, cfg.decoder_width, &mut rng);
        let implicit = (!cfg.explicit_density).then(|| ImplicitDensity::new(&mut store, "implicit", c, 16, &mut rng));
        let bins = DepthBins::uniform(cfg.frustum_near, cfg.frustum_far, cfg.depth_bins)?;
        let spec = world.grid()?;
        Ok(Self { cfg, world, store, encoder, decoder, implicit, bins, spec })
    }

    /// Channels of the grid handed to the renderer and latent autoencoder.
    pub fn grid_channels(&self) -> usize {
        self.cfg.feature_channels + self.cfg.explicit_density as usize
    }

    pub fn render_size(&self) -> usize {
        self.world.image_size / 2
    }

    pub fn prepare(&self, rec: &DatasetRecord) -> Result<PreparedScene> {
        let size = self.world.image_size;
        let lo = self.render_size();
        let enc_lo = size / self.cfg.downsample;
        let nc = rec.n_cameras;
        let images: Vec<Tensor> = rec.images.iter().map(Image::to_chw).collect();
        let depths = rec
            .depths
            .iter()
            .map(|d| downsample_depth(d, size, lo, self.world.far))
            .collect::<Result<Vec<_>>>()?;
        let poses_lo: Vec<CameraPose> =
            rec.poses.iter().map(|p| p.with_intrinsics(p.intrinsics.scaled((size / lo) as f64))).collect();
        let views_of = |frames: &[usize]| -> Vec<usize> {
            frames.iter().flat_map(|&f| (0..nc).map(move |c| f * nc + c)).filter(|&v| v < rec.images.len()).collect()
        };
        let input_views = views_of(&self.cfg.input_frames);
        let held_out_views = views_of(&self.cfg.held_out_frames);
        if input_views.is_empty() {
            return Err(NfError::InvalidArgument(format!("scene {} has no input views", rec.scene_id)));
        }
        let input_batch = Tensor::stack(&input_views.iter().map(|&v| images[v].clone()).collect::<Vec<_>>())?;
        let enc_poses: Vec<CameraPose> = input_views
            .iter()
            .map(|&v| rec.poses[v].with_intrinsics(rec.poses[v].intrinsics.scaled(self.cfg.downsample as f64)))
            .collect();
        let fusion = FusionPlan::new(&enc_poses, enc_lo, enc_lo, &self.bins, &self.spec)?;
        Ok(PreparedScene {
            scene_id: rec.scene_id,
            images,
            raw_images: rec.images.clone(),
            depths,
            poses_lo,
            input_views,
            held_out_views,
            input_batch,
            fusion,
        })
    }

    /// Fused `[1 + C, Z, X, Y]` grid (features only for the implicit variant).
    pub fn encode_graph(&self, g: &mut Graph, scene: &PreparedScene) -> Result<Var> {
        let x = g.constant(scene.input_batch.clone());
        let fields = self.encoder.forward(g, &self.store, x)?;
        let entries = frustum_entries(g, fields, self.bins.deltas())?;
        let grid = scene.fusion.apply(g, entries)?;
        if self.cfg.explicit_density {
            Ok(grid)
        } else {
            Ok(g.narrow(grid, 0, 1, self.cfg.feature_channels)?)
        }
    }

    pub fn encode(&self, scene: &PreparedScene) -> Result<VoxelGrid> {
        let mut g = Graph::new();
        g.freeze(&self.store);
        let v = self.encode_graph(&mut g, scene)?;
        self.grid_from_tensor(&g.tensor(v), scene.fusion.fill_mask.clone())
    }

    pub fn grid_from_tensor(&self, t: &Tensor, fill_mask: Vec<bool>) -> Result<VoxelGrid> {
        if self.cfg.explicit_density {
            VoxelGrid::from_tensor(t, self.spec, fill_mask)
        } else {
            let [z, x, y] = self.spec.dims;
            let mut data = vec![0.0; z * x * y];
            data.extend_from_slice(t.data());
            VoxelGrid::from_tensor(&Tensor::new([t.shape()[0] + 1, z, x, y], data)?, self.spec, fill_mask)
        }
    }

    pub fn grid_tensor(&self, grid: &VoxelGrid) -> Tensor {
        if self.cfg.explicit_density {
            grid.to_tensor()
        } else {
            grid.feature.clone()
        }
    }

    pub fn render_plan(&self, pose_lo: &CameraPose) -> Result<RenderPlan> {
        let lo = self.render_size();
        RenderPlan::new(pose_lo, lo, lo, self.cfg.render_samples, self.cfg.render_near, self.cfg.render_far, &self.spec)
    }

    /// Renders views of a grid variable and decodes them to `[M, 3, H, W]`.
    pub fn render_views(&self, g: &mut Graph, grid: Var, poses_lo: &[CameraPose]) -> Result<(Var, Vec<RenderVars>)> {
        let lo = self.render_size();
        let c = self.cfg.feature_channels;
        let source = match &self.implicit {
            Some(net) => DensitySource::Implicit(net, &self.store),
            None => DensitySource::Explicit,
        };
        let mut maps = Vec::with_capacity(poses_lo.len());
        let mut outs = Vec::with_capacity(poses_lo.len());
        for pose in poses_lo {
            let plan = self.render_plan(pose)?;
            let rv = render_graph(g, grid, &plan, source)?;
            maps.push(g.reshape(rv.features, &[1, c, lo, lo])?);
            outs.push(rv);
        }
        let fmap = g.concat(&maps, 0)?;
        let rgb = self.decoder.forward(g, &self.store, fmap)?;
        Ok((rgb, outs))
    }

    /// Scene-autoencoder loss of the rendered `views` against ground truth.
    pub fn views_loss(
        &self,
        g: &mut Graph,
        grid: Var,
        scene: &PreparedScene,
        views: &[usize],
    ) -> Result<(Var, SceneAeLossReport)> {
        let poses: Vec<CameraPose> = views.iter().map(|&v| scene.poses_lo[v]).collect();
        let (rgb, outs) = self.render_views(g, grid, &poses)?;
        let target = g.constant(Tensor::stack(&views.iter().map(|&v| scene.images[v].clone()).collect::<Vec<_>>())?);
        let depth_vars: Vec<Var> = outs.iter().map(|o| o.depth).collect();
        let pred_depth = g.concat(&depth_vars, 0)?;
        let tgt: Vec<f32> = views.iter().flat_map(|&v| scene.depths[v].0.data().to_vec()).collect();
        let valid: Vec<f32> = views.iter().flat_map(|&v| scene.depths[v].1.data().to_vec()).collect();
        let n = tgt.len();
        let tgt = g.constant(Tensor::new([n], tgt)?);
        let valid = g.constant(Tensor::new([n], valid)?);
        let w_vars: Vec<Var> = outs.iter().map(|o| o.weights).collect();
        let weights = g.concat(&w_vars, 0)?;
        scene_ae_loss(g, self.cfg.loss_weights(), rgb, target, pred_depth, tgt, valid, weights)
    }

    /// One Adam step on a random subset of the scene's views.
    pub fn train_step<R: Rng>(&mut self, adam: &mut AdamState, scene: &PreparedScene, rng: &mut R) -> Result<SceneAeLossReport> {
        let all: Vec<usize> = (0..scene.images.len()).filter(|v| !scene.held_out_views.contains(v)).collect();
        let views: Vec<usize> = all.choose_multiple(rng, self.cfg.supervision_views.min(all.len())).copied().collect();
        let mut g = Graph::new();
        let grid = self.encode_graph(&mut g, scene)?;
        let (loss, report) = self.views_loss(&mut g, grid, scene, &views)?;
        let grads = g.backward(loss)?;
        let grads = grads.for_store(&self.store);
        adam.step(&mut self.store, &grads)?;
        Ok(report)
    }

    pub fn adam(&self) -> Result<AdamState> {
        Ok(AdamState::new(
            &self.store,
            AdamConfig { lr: self.cfg.lr, beta1: self.cfg.beta1, beta2: self.cfg.beta2, eps: 1e-8, weight_decay: 0.0 },
        )?)
    }

    /// Trains for `steps` steps cycling through shuffled scenes; returns the
    /// per-step loss reports.
    pub fn train(&mut self, scenes: &[PreparedScene], steps: usize, seed: u64) -> Result<Vec<SceneAeLossReport>> {
        let mut trainer = SceneAeTrainer::new(self, seed)?;
        trainer.run(self, scenes, steps)
    }

    /// Decoded RGB images of `grid` seen from full-resolution `poses`.
    pub fn render_images(&self, grid: &VoxelGrid, poses: &[CameraPose]) -> Result<Vec<Image>> {
        let factor = (self.world.image_size / self.render_size()) as f64;
        let lo: Vec<CameraPose> = poses.iter().map(|p| p.with_intrinsics(p.intrinsics.scaled(factor))).collect();
        let mut out = Vec::with_capacity(poses.len());
        for chunk in lo.chunks(8) {
            let mut g = Graph::new();
            g.freeze(&self.store);
            let v = g.constant(self.grid_tensor(grid));
            let (rgb, _) = self.render_views(&mut g, v, chunk)?;
            let size = self.world.image_size;
            for img in g.value(rgb).chunks(3 * size * size) {
                out.push(Image::from_chw(img, size, size)?);
            }
        }
        Ok(out)
    }

    /// Mean PSNR of the held-out views of `scenes` (never seen by the encoder).
    pub fn held_out_psnr(&self, scenes: &[PreparedScene]) -> Result<f64> {
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for s in scenes {
            let grid = self.encode(s)?;
            let full: Vec<CameraPose> = s
                .held_out_views
                .iter()
                .map(|&v| s.poses_lo[v].with_intrinsics(s.poses_lo[v].intrinsics.scaled(0.5)))
                .collect();
            preds.extend(self.render_images(&grid, &full)?);
            targets.extend(s.held_out_views.iter().map(|&v| s.raw_images[v].clone()));
        }
        metrics::mean_psnr(&preds, &targets)
    }

    /// Fine-tunes a grid directly against all non-held-out views of its scene.
    pub fn refine(&self, grid: &VoxelGrid, scene: &PreparedScene, steps: usize, seed: u64) -> Result<VoxelGrid> {
        if steps == 0 {
            return Ok(grid.clone());
        }
        let mut rng = substream(seed, &format!("refine-{}", scene.scene_id));
        let mut store = ParamStore::new();
        let id = store.add("grid", self.grid_tensor(grid));
        let mut adam = AdamState::new(
            &store,
            AdamConfig { lr: self.cfg.refine_lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 },
        )?;
        let all: Vec<usize> = (0..scene.images.len()).filter(|v| !scene.held_out_views.contains(v)).collect();
        for _ in 0..steps {
            let views: Vec<usize> = all.choose_multiple(&mut rng, self.cfg.supervision_views.min(all.len())).copied().collect();
            let mut g = Graph::new();
            g.freeze(&self.store);
            let v = g.param(&store, id);
            let (loss, _) = self.views_loss(&mut g, v, scene, &views)?;
            let grads = g.backward(loss)?;
            let grads = grads.for_store(&store);
            adam.step(&mut store, &grads)?;
            if self.cfg.explicit_density {
                let nv = self.spec.num_voxels();
                store.get_mut(id).data_mut()[..nv].iter_mut().for_each(|d| *d = d.max(0.0));
            }
        }
        self.grid_from_tensor(store.get(id), grid.fill_mask.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(path, self.store.iter())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load_from(io::load_checkpoint(path)?)?;
        Ok(())
    }
}

/// Resumable training state: optimizer moments, data order and RNG.
pub struct SceneAeTrainer {
    adam: AdamState,
    rng: crate::rng::Rng,
    order: Vec<usize>,
    pub step: usize,
}

impl SceneAeTrainer {
    pub fn new(ae: &SceneAe, seed: u64) -> Result<Self> {
        Ok(Self { adam: ae.adam()?, rng: substream(seed, "scene-ae-train"), order: Vec::new(), step: 0 })
    }

    pub fn run(&mut self, ae: &mut SceneAe, scenes: &[PreparedScene], steps: usize) -> Result<Vec<SceneAeLossReport>> {
        if scenes.is_empty() {
            return Err(NfError::InvalidArgument("no training scenes".into()));
        }
        if self.order.len() != scenes.len() {
            self.order = (0..scenes.len()).collect();
        }
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let k = self.step % scenes.len();
            if k == 0 {
                self.order.shuffle(&mut self.rng);
            }
            let p = (self.step as f64 / ae.cfg.steps.max(1) as f64).min(1.0);
            let floor = ae.cfg.lr_min_scale as f64;
            let scale = floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
            self.adam.set_lr((ae.cfg.lr as f64 * scale) as f32);
            let r = ae.train_step(&mut self.adam, &scenes[self.order[k]], &mut self.rng)?;
            if self.step % 200 == 0 {
                log::info!("scene-ae step {}: {r:?}", self.step);
            }
            self.step += 1;
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Block-averages a `size × size` depth map to `lo × lo`. A block is valid when
/// all its pixels carry a measurement short of `far` and span < 0.5 m.
pub fn downsample_depth(depth: &[f32], size: usize, lo: usize, far: f64) -> Result<(Tensor, Tensor)> {
    if depth.len() != size * size || size % lo != 0 {
        return Err(NfError::InvalidArgument(format!("depth map of {} values for {size}x{size}", depth.len())));
    }
    let f = size / lo;
    let mut out = vec![0.0; lo * lo];
    let mut valid = vec![0.0; lo * lo];
    for y in 0..lo {
        for x in 0..lo {
            let block: Vec<f32> =
                (0..f * f).map(|k| depth[(y * f + k / f) * size + x * f + k % f]).collect();
            let (mn, mx) = block.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            if mn > 0.0 && (mx as f64) < far && mx - mn < 0.5 {
                out[y * lo + x] = block.iter().sum::<f32>() / block.len() as f32;
                valid[y * lo + x] = 1.0;
            }
        }
    }
    Ok((Tensor::new([lo * lo], out)?, Tensor::new([lo * lo], valid)?))
}
