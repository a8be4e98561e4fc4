//! Procedural box world captured by a six-camera 360° rig moving along a short
//! straight trajectory, with an analytic RGB-D ray caster and on-disk dataset
//! format.
//!
//! Directory layout written by [`write_dataset`]:
//!
//! ```text
//! <dir>/index.json               {"scenes": [<id>, ...]}
//! <dir>/scene_<id>/meta.json     poses, scene description, rig layout
//! <dir>/scene_<id>/view_<k>.png  RGB view k (k = frame * n_cameras + camera)
//! <dir>/scene_<id>/depth.nft     [views, H, W] optical-axis depth, 0 = missing
//! <dir>/scene_<id>/bev.png       bird's-eye class map, see [`BEV_LEGEND`]
//! ```

use std::path::Path;

use nfldm_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{dot, CameraPose, GridSpec, Intrinsics, Vec3};
use crate::io::{self, Image};
use crate::rng::substream;
use crate::{NfError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// `(Z, X, Y)` voxel counts of the scene lattice.
    pub grid_dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// World `(x, y, z)` of the lattice's minimum corner.
    pub grid_origin: [f64; 3],
    pub image_size: usize,
    pub fov_deg: f64,
    pub camera_height: f64,
    pub pitch_deg: f64,
    pub n_cameras: usize,
    pub n_frames: usize,
    pub frame_spacing: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub near: f64,
    pub far: f64,
    /// Fraction of depth pixels kept; below 1 exercises sparse supervision.
    pub depth_keep_fraction: f64,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_dims: [8, 16, 16],
            voxel_size: [0.5, 0.5, 0.5],
            grid_origin: [-4.0, -4.0, -0.5],
            image_size: 32,
            fov_deg: 90.0,
            camera_height: 1.5,
            pitch_deg: 15.0,
            n_cameras: 6,
            n_frames: 9,
            frame_spacing: 0.25,
            min_boxes: 2,
            max_boxes: 6,
            near: 0.3,
            far: 12.0,
            depth_keep_fraction: 1.0,
            n_train_scenes: 48,
            n_test_scenes: 16,
        }
    }
}

impl WorldConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid_dims, self.voxel_size, self.grid_origin)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.image_size, self.image_size, self.fov_deg.to_radians())
    }

    pub fn views_per_scene(&self) -> usize {
        self.n_cameras * self.n_frames
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(NfError::Config { section: "world".into(), field: field.into(), msg: msg.into() })
        };
        if self.grid().is_err() {
            return bad("grid_dims", "grid dims and voxel size must be positive");
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return bad("image_size", "must be a positive multiple of 4");
        }
        if self.min_boxes > self.max_boxes {
            return bad("min_boxes", "exceeds max_boxes");
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return bad("near", "need 0 < near < far");
        }
        if self.n_cameras == 0 || self.n_frames == 0 {
            return bad("n_cameras", "rig needs at least one camera and frame");
        }
        if !(0.0..=1.0).contains(&self.depth_keep_fraction) || self.depth_keep_fraction == 0.0 {
            return bad("depth_keep_fraction", "must be in (0, 1]");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg", "must be in (0, 180)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub center: Vec3,
    pub half: Vec3,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub ground: [f64; 3],
    pub sky: [f64; 3],
    pub boxes: Vec<BoxObject>,
    /// Global brightness control in `[0, 1]`.
    pub style: f64,
    /// Ground exists only over `[xmin, xmax] × [ymin, ymax]`.
    pub ground_extent: [f64; 4],
    pub far: f64,
    pub heading: f64,
    /// Rig position `(x, y)` per frame.
    pub trajectory: Vec<[f64; 2]>,
}

pub const SKY: [f64; 3] = [0.6, 0.75, 0.95];
const CLEARANCE: f64 = 0.7;

impl SceneDescription {
    pub fn brightness(&self) -> f64 {
        0.55 + 0.45 * self.style
    }

    /// Trajectory flattened to `[x0, y0, x1, y1, ...]`.
    pub fn trajectory_vector(&self) -> Vec<f32> {
        self.trajectory.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()
    }
}

fn footprint_distance(b: &BoxObject, p: [f64; 2]) -> f64 {
    let dx = ((p[0] - b.center[0]).abs() - b.half[0]).max(0.0);
    let dy = ((p[1] - b.center[1]).abs() - b.half[1]).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

fn overlaps(a: &BoxObject, b: &BoxObject) -> bool {
    (a.center[0] - b.center[0]).abs() < a.half[0] + b.half[0] + 0.1
        && (a.center[1] - b.center[1]).abs() < a.half[1] + b.half[1] + 0.1
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<SceneDescription> {
    cfg.validate()?;
    let mut rng = substream(seed, "scene");
    let grid = cfg.grid()?;
    let ext = grid.extent();
    // the interpolation hull spans voxel centers, half a voxel inside the lattice
    let (hx, hy) = (grid.voxel_size[1] / 2.0, grid.voxel_size[2] / 2.0);
    let (x0, y0) = (grid.origin[0] + hx, grid.origin[1] + hy);
    let (x1, y1) = (grid.origin[0] + ext[1] - hx, grid.origin[1] + ext[2] - hy);
    let top = grid.origin[2] + ext[0] - grid.voxel_size[0] / 2.0;

    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let start = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let mid = (cfg.n_frames as f64 - 1.0) / 2.0;
    let trajectory: Vec<[f64; 2]> = (0..cfg.n_frames)
        .map(|k| {
            let s = (k as f64 - mid) * cfg.frame_spacing;
            [start[0] + s * heading.cos(), start[1] + s * heading.sin()]
        })
        .collect();

    let n_boxes = rng.gen_range(cfg.min_boxes..=cfg.max_boxes);
    let max_height = (top - 0.3).max(0.5);
    let mut boxes: Vec<BoxObject> = Vec::with_capacity(n_boxes);
    let mut attempts = 0;
    while boxes.len() < n_boxes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(NfError::InvalidArgument(format!("could not place {n_boxes} boxes in the world")));
        }
        let half_xy = [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)];
        let height = rng.gen_range(0.4..max_height.min(2.8));
        let cx = rng.gen_range(x0 + half_xy[0]..x1 - half_xy[0]);
        let cy = rng.gen_range(y0 + half_xy[1]..y1 - half_xy[1]);
        let albedo = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let b = BoxObject { center: [cx, cy, height / 2.0], half: [half_xy[0], half_xy[1], height / 2.0], albedo };
        if trajectory.iter().any(|&p| footprint_distance(&b, p) < CLEARANCE)
            || boxes.iter().any(|o| overlaps(o, &b))
        {
            continue;
        }
        boxes.push(b);
    }
    let g = rng.gen_range(0.3..0.5);
    let ground = [g + rng.gen_range(-0.05..0.05), g + rng.gen_range(0.0..0.1), g - rng.gen_range(0.0..0.1)];
    Ok(SceneDescription {
        ground,
        sky: SKY,
        boxes,
        style: rng.gen_range(0.0..1.0),
        ground_extent: [x0, x1, y0, y1],
        far: cfg.far,
        heading,
        trajectory,
    })
}

fn intersect_box(b: &BoxObject, o: Vec3, d: Vec3) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        let (lo, hi) = (b.center[a] - b.half[a], b.center[a] + b.half[a]);
        if d[a].abs() < 1e-12 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    (t_near <= t_far && t_near > 1e-9).then_some((t_near, axis))
}

/// Color and optical-axis depth seen through continuous pixel `(u, v)`.
pub fn cast_pixel(scene: &SceneDescription, pose: &CameraPose, u: f64, v: f64) -> ([f32; 3], f32) {
    let (o, d) = pose.ray_for_pixel(u, v);
    let forward = [pose.rotation[0][2], pose.rotation[1][2], pose.rotation[2][2]];
    let cos = dot(d, forward);
    let mut best: Option<(f64, [f64; 3])> = None;
    if d[2] < -1e-12 {
        let t = -o[2] / d[2];
        let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
        let e = scene.ground_extent;
        if t > 0.0 && x >= e[0] && x <= e[1] && y >= e[2] && y <= e[3] {
            best = Some((t, scene.ground));
        }
    }
    for b in &scene.boxes {
        if let Some((t, axis)) = intersect_box(b, o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                let shade = [0.8, 0.65, 1.0][axis];
                best = Some((t, b.albedo.map(|a| a * shade)));
            }
        }
    }
    match best {
        Some((t, rgb)) if t * cos <= scene.far => {
            let k = scene.brightness();
            (rgb.map(|c| (c * k) as f32), (t * cos) as f32)
        }
        _ => (scene.sky.map(|c| c as f32), scene.far as f32),
    }
}

/// RGB image and per-pixel optical-axis depth (sky reports `far`).
pub fn render_ground_truth(
    scene: &SceneDescription,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> (Image, Vec<f32>) {
    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut depth = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (c, dp) = cast_pixel(scene, pose, x as f64 + 0.5, y as f64 + 0.5);
            rgb.extend_from_slice(&c);
            depth.push(dp);
        }
    }
    (Image { width, height, data: rgb }, depth)
}

/// Yaw offsets of the rig: front-left, front, front-right, back-left, back,
/// back-right for six cameras; evenly spaced otherwise.
pub fn rig_yaw_offsets(n_cameras: usize) -> Vec<f64> {
    if n_cameras == 6 {
        [60.0f64, 0.0, -60.0, 120.0, 180.0, -120.0].iter().map(|d| d.to_radians()).collect()
    } else {
        (0..n_cameras).map(|k| std::f64::consts::TAU * k as f64 / n_cameras as f64).collect()
    }
}

/// Poses for every `(frame, camera)` pair of a trajectory, frame-major.
pub fn rig_poses(trajectory: &[[f64; 2]], heading: f64, cfg: &WorldConfig) -> Vec<CameraPose> {
    let k = cfg.intrinsics();
    let offsets = rig_yaw_offsets(cfg.n_cameras);
    let mut poses = Vec::with_capacity(trajectory.len() * offsets.len());
    for p in trajectory {
        for off in &offsets {
            poses.push(CameraPose::from_yaw_pitch(
                [p[0], p[1], cfg.camera_height],
                heading + off,
                cfg.pitch_deg.to_radians(),
                k,
            ));
        }
    }
    poses
}

/// Bird's-eye class raster over the lattice's `(X, Y)` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Bev {
    pub nx: usize,
    pub ny: usize,
    pub classes: Vec<u8>,
}

/// Class colors: 0 open ground, 1 low object (< 1.2 m), 2 tall object.
pub const BEV_LEGEND: [[u8; 3]; 3] = [[64, 64, 64], [255, 160, 0], [220, 20, 60]];
pub const BEV_CLASSES: usize = 3;

impl Bev {
    pub fn rasterize(scene: &SceneDescription, grid: &GridSpec) -> Self {
        let (nx, ny) = (grid.dims[1], grid.dims[2]);
        let mut classes = vec![0u8; nx * ny];
        for ix in 0..nx {
            for iy in 0..ny {
                let c = grid.voxel_center([0, ix, iy]);
                for b in &scene.boxes {
                    if (c[0] - b.center[0]).abs() <= b.half[0] && (c[1] - b.center[1]).abs() <= b.half[1] {
                        let class = if 2.0 * b.half[2] < 1.2 { 1 } else { 2 };
                        classes[ix * ny + iy] = classes[ix * ny + iy].max(class);
                    }
                }
            }
        }
        Self { nx, ny, classes }
    }

    /// One-hot `[classes, X, Y]`.
    pub fn one_hot(&self) -> Tensor {
        let n = self.nx * self.ny;
        Tensor::from_fn([BEV_CLASSES, self.nx, self.ny], |i| (self.classes[i % n] as usize == i / n) as u8 as f32)
    }

    /// PNG rows are X, columns are Y.
    pub fn to_image(&self) -> Image {
        let data = self
            .classes
            .iter()
            .flat_map(|&c| BEV_LEGEND[c as usize].map(|b| b as f32 / 255.0))
            .collect();
        Image { width: self.ny, height: self.nx, data }
    }

    /// Nearest legend color per pixel.
    pub fn from_image(img: &Image) -> Self {
        let classes = (0..img.width * img.height)
            .map(|p| {
                let px = [img.data[p * 3], img.data[p * 3 + 1], img.data[p * 3 + 2]];
                (0..BEV_CLASSES)
                    .min_by(|&a, &b| legend_dist(px, a).total_cmp(&legend_dist(px, b)))
                    .expect("legend is non-empty") as u8
            })
            .collect();
        Self { nx: img.height, ny: img.width, classes }
    }
}

fn legend_dist(px: [f32; 3], class: usize) -> f32 {
    px.iter().zip(BEV_LEGEND[class]).map(|(&p, l)| (p - l as f32 / 255.0).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub scene_id: u64,
    pub images: Vec<Image>,
    /// Optical-axis depth per view, row-major; 0 marks a missing measurement.
    pub depths: Vec<Vec<f32>>,
    pub poses: Vec<CameraPose>,
    pub n_cameras: usize,
    pub bev: Option<Bev>,
    pub scene: Option<SceneDescription>,
}

impl DatasetRecord {
    pub fn view(&self, frame: usize, camera: usize) -> usize {
        frame * self.n_cameras + camera
    }

    pub fn n_frames(&self) -> usize {
        self.images.len() / self.n_cameras.max(1)
    }
}

/// Renders every rig view of the scene generated for `(seed, scene_id)`.
pub fn generate_record(seed: u64, scene_id: u64, cfg: &WorldConfig) -> Result<DatasetRecord> {
    let scene_seed = substream(seed, &format!("scene-{scene_id}")).gen::<u64>();
    let scene = generate_scene(scene_seed, cfg)?;
    let poses = rig_poses(&scene.trajectory, scene.heading, cfg);
    let mut mask_rng = substream(scene_seed, "depth-mask");
    let mut images = Vec::with_capacity(poses.len());
    let mut depths = Vec::with_capacity(poses.len());
    for pose in &poses {
        let (img, mut depth) = render_ground_truth(&scene, pose, cfg.image_size, cfg.image_size);
        if cfg.depth_keep_fraction < 1.0 {
            for d in &mut depth {
                if !mask_rng.gen_bool(cfg.depth_keep_fraction) {
                    *d = 0.0;
                }
            }
        }
        images.push(img);
        depths.push(depth);
    }
    let bev = Some(Bev::rasterize(&scene, &cfg.grid()?));
    Ok(DatasetRecord { scene_id, images, depths, poses, n_cameras: cfg.n_cameras, bev, scene: Some(scene) })
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    scene_id: u64,
    width: usize,
    height: usize,
    n_views: usize,
    n_cameras: usize,
    poses: Vec<serde_json::Value>,
    scene: Option<SceneDescription>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    scenes: Vec<u64>,
}

fn scene_dir(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("scene_{id:05}"))
}

pub fn write_dataset(records: &[DatasetRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for rec in records {
        write_record(rec, dir)?;
    }
    let index = DatasetIndex { scenes: records.iter().map(|r| r.scene_id).collect() };
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

fn write_record(rec: &DatasetRecord, dir: &Path) -> Result<()> {
    let n = rec.images.len();
    if rec.depths.len() != n || rec.poses.len() != n || n == 0 {
        return Err(NfError::InvalidArgument(format!("scene {}: unequal view lists", rec.scene_id)));
    }
    let (w, h) = (rec.images[0].width, rec.images[0].height);
    let sd = scene_dir(dir, rec.scene_id);
    std::fs::create_dir_all(&sd)?;
    let mut depth = Vec::with_capacity(n * w * h);
    for (k, (img, dp)) in rec.images.iter().zip(&rec.depths).enumerate() {
        if img.width != w || img.height != h || dp.len() != w * h {
            return Err(NfError::InvalidArgument(format!("scene {} view {k}: extent mismatch", rec.scene_id)));
        }
        io::write_png(&sd.join(format!("view_{k:03}.png")), img)?;
        depth.extend_from_slice(dp);
    }
    io::save_nft(&sd.join("depth.nft"), &Tensor::new([n, h, w], depth)?)?;
    if let Some(bev) = &rec.bev {
        io::write_png(&sd.join("bev.png"), &bev.to_image())?;
    }
    let meta = SceneMeta {
        scene_id: rec.scene_id,
        width: w,
        height: h,
        n_views: n,
        n_cameras: rec.n_cameras,
        poses: rec.poses.iter().map(CameraPose::to_json).collect(),
        scene: rec.scene.clone(),
    };
    std::fs::write(sd.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn dataset_scene_ids(dir: &Path) -> Result<Vec<u64>> {
    let index: DatasetIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
    Ok(index.scenes)
}

pub fn read_record(dir: &Path, id: u64) -> Result<DatasetRecord> {
    let sd = scene_dir(dir, id);
    let meta: SceneMeta = serde_json::from_str(&std::fs::read_to_string(sd.join("meta.json"))?)?;
    let depth = io::load_nft(&sd.join("depth.nft"))?;
    if depth.shape() != [meta.n_views, meta.height, meta.width] {
        return Err(NfError::Format(format!(
            "scene {id}: depth tensor {:?} does not match {} views of {}x{}",
            depth.shape(),
            meta.n_views,
            meta.width,
            meta.height
        )));
    }
    let hw = meta.width * meta.height;
    let depths = depth.data().chunks(hw).map(<[f32]>::to_vec).collect();
    let mut images = Vec::with_capacity(meta.n_views);
    for k in 0..meta.n_views {
        let img = io::read_png(&sd.join(format!("view_{k:03}.png")))?;
        if img.width != meta.width || img.height != meta.height {
            return Err(NfError::Format(format!("scene {id} view {k}: image extent mismatch")));
        }
        images.push(img);
    }
    let poses = meta.poses.iter().map(CameraPose::from_json).collect::<Result<Vec<_>>>()?;
    let bev_path = sd.join("bev.png");
    let bev = if bev_path.exists() { Some(Bev::from_image(&io::read_png(&bev_path)?)) } else { None };
    Ok(DatasetRecord { scene_id: id, images, depths, poses, n_cameras: meta.n_cameras, bev, scene: meta.scene })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetRecord>> {
    dataset_scene_ids(dir)?.into_iter().map(|id| read_record(dir, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig { n_frames: 3, ..WorldConfig::default() }
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = WorldConfig::default();
        let a = generate_scene(11, &cfg).unwrap();
        assert_eq!(a, generate_scene(11, &cfg).unwrap());
        assert_ne!(a, generate_scene(12, &cfg).unwrap());
        for b in &a.boxes {
            assert!(b.center[0] - b.half[0] >= -3.75 && b.center[0] + b.half[0] <= 3.75);
            assert!(b.center[2] + b.half[2] <= 3.25);
            assert!(b.albedo.iter().all(|c| (0.0..=1.0).contains(c)));
        }
        let empty = generate_scene(3, &WorldConfig { min_boxes: 0, max_boxes: 0, ..cfg }).unwrap();
        assert!(empty.boxes.is_empty());
    }

    #[test]
    fn box_counts_are_uniform() {
        let cfg = WorldConfig::default();
        let mut counts = [0usize; 7];
        for seed in 0..1000 {
            counts[generate_scene(seed, &cfg).unwrap().boxes.len()] += 1;
        }
        assert_eq!(counts[0] + counts[1], 0);
        // five equally likely outcomes: expected 200 each, sd ~12.6
        for &c in &counts[2..] {
            assert!((c as f64 - 200.0).abs() < 60.0, "{counts:?}");
        }
    }

    #[test]
    fn looking_down_at_empty_ground() {
        let cfg = WorldConfig { min_boxes: 0, max_boxes: 0, ..WorldConfig::default() };
        let scene = generate_scene(5, &cfg).unwrap();
        let k = Intrinsics::from_fov(8, 8, 0.5);
        let pose = CameraPose::from_yaw_pitch([0.0, 0.0, 2.0], 0.3, std::f64::consts::FRAC_PI_2, k);
        let (img, depth) = render_ground_truth(&scene, &pose, 8, 8);
        let expect = scene.ground.map(|c| (c * scene.brightness()) as f32);
        for p in 0..64 {
            assert_eq!(img.pixel(p % 8, p / 8), expect);
            assert!((depth[p] - 2.0).abs() < 1e-5);
        }
        let up = CameraPose::from_yaw_pitch([0.0, 0.0, 2.0], 0.0, -1.2, k);
        let (img, depth) = render_ground_truth(&scene, &up, 8, 8);
        assert_eq!(img.pixel(3, 3), SKY.map(|c| c as f32));
        assert_eq!(depth[27], cfg.far as f32);
    }

    fn reprojection_counts(scene: &SceneDescription, a: &CameraPose, b: &CameraPose, far: f64) -> (usize, usize) {
        let (_, depth) = render_ground_truth(scene, a, 32, 32);
        let (mut checked, mut agree) = (0, 0);
        for y in 0..32 {
            for x in 0..32 {
                let d = depth[y * 32 + x] as f64;
                if d >= far {
                    continue;
                }
                let p = a.lift_pixel(x as f64 + 0.5, y as f64 + 0.5, d).unwrap();
                let Some((u, v, db)) = b.project(p) else { continue };
                if !(0.0..32.0).contains(&u) || !(0.0..32.0).contains(&v) {
                    continue;
                }
                checked += 1;
                let (_, seen) = cast_pixel(scene, b, u, v);
                // the second camera may see something nearer (occluder), never farther
                assert!((seen as f64) < db + 1e-3, "sees through a surface at ({x}, {y})");
                if (seen as f64 - db).abs() < 1e-3 {
                    agree += 1;
                }
            }
        }
        (checked, agree)
    }

    #[test]
    fn views_are_multiview_consistent() {
        let cfg = WorldConfig::default();
        let scene = generate_scene(21, &cfg).unwrap();
        let poses = rig_poses(&scene.trajectory, scene.heading, &cfg);
        // shared optical center: no parallax, so every overlapping pixel agrees
        let (checked, agree) = reprojection_counts(&scene, &poses[1], &poses[0], cfg.far);
        assert!(checked > 50 && agree == checked, "{agree}/{checked}");
        let (checked, agree) = reprojection_counts(&scene, &poses[1], &poses[8 * 6], cfg.far);
        assert!(checked > 50 && agree > checked / 4, "{agree}/{checked}");
    }

    #[test]
    fn dataset_roundtrip_and_tamper_detection() {
        let cfg = WorldConfig { depth_keep_fraction: 0.5, ..small_cfg() };
        let recs = vec![generate_record(1, 0, &cfg).unwrap(), generate_record(1, 1, &cfg).unwrap()];
        assert!(recs[0].depths[0].contains(&0.0));
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&recs, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        for (r, b) in recs.iter().zip(&back) {
            assert_eq!(r.depths, b.depths);
            assert_eq!(r.poses, b.poses);
            assert_eq!(r.bev, b.bev);
            assert_eq!(r.scene, b.scene);
            for (i, j) in r.images.iter().zip(&b.images) {
                assert_eq!(&i.quantized(), j);
            }
        }
        let path = dir.path().join("scene_00000/depth.nft");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'?';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_record(dir.path(), 0), Err(NfError::Format(_))));
    }

    #[test]
    fn bev_png_roundtrip() {
        let cfg = WorldConfig::default();
        let scene = generate_scene(4, &cfg).unwrap();
        let bev = Bev::rasterize(&scene, &cfg.grid().unwrap());
        assert!(bev.classes.iter().any(|&c| c > 0));
        assert_eq!(Bev::from_image(&bev.to_image().quantized()), bev);
        let oh = bev.one_hot();
        assert_eq!(oh.sum(), 256.0);
    }
}
