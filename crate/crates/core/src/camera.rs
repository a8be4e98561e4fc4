//! Pinhole cameras, metric depth bins and the world-aligned voxel lattice.
//!
//! World frame is right-handed with +Z up. Camera frame: +x right, +y down,
//! +z forward. Pixel coordinates are continuous; integer pixel `(i, j)` has
//! its center at `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::{NfError, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Rotation by `angle` radians about world +Z.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}


#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square-pixel intrinsics for a `width × height` image with the given
    /// horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = width as f64 / 2.0 / (fov_x / 2.0).tan();
        Self { fx, fy: fx, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }

    /// Intrinsics of the same camera after downsampling the image by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { fx: self.fx / factor, fy: self.fy / factor, cx: self.cx / factor, cy: self.cy / factor }
    }
}

/// World-from-camera rigid transform plus pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let pose = Self { rotation, translation, intrinsics };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let col_dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (col_dot - expect).abs() > 1e-6 {
                    return Err(NfError::InvalidArgument("rotation is not orthonormal".into()));
                }
            }
        }
        if (dot(cross(r_col(r, 0), r_col(r, 1)), r_col(r, 2)) - 1.0).abs() > 1e-6 {
            return Err(NfError::InvalidArgument("rotation has determinant -1".into()));
        }
        let k = self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(NfError::InvalidArgument(format!("focal lengths must be positive: {k:?}")));
        }
        Ok(())
    }

    /// Camera at `eye` facing horizontal heading `yaw` (radians from world +X
    /// toward +Y), tilted down by `pitch` radians.
    pub fn from_yaw_pitch(eye: Vec3, yaw: f64, pitch: f64, intrinsics: Intrinsics) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cp * cy, cp * sy, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self { rotation, translation: eye, intrinsics }
    }

    /// Camera-frame (unnormalized, z = 1) direction through a pixel.
    pub fn camera_dir(&self, u: f64, v: f64) -> Vec3 {
        let k = self.intrinsics;
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]
    }

    pub fn to_world_dir(&self, d: Vec3) -> Vec3 {
        mat_vec(&self.rotation, d)
    }

    /// Origin and unit world direction of the ray through pixel `(u, v)`.
    pub fn ray_for_pixel(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        (self.translation, normalize(self.to_world_dir(self.camera_dir(u, v))))
    }

    /// World point at optical-axis depth `depth` along the pixel's ray.
    pub fn lift_pixel(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(NfError::InvalidArgument(format!("depth {depth} must be positive")));
        }
        let d = self.camera_dir(u, v);
        if !d.iter().all(|x| x.is_finite()) {
            return Err(NfError::InvalidArgument("ray parallel to the image plane".into()));
        }
        let w = self.to_world_dir(d);
        let t = self.translation;
        Ok([t[0] + depth * w[0], t[1] + depth * w[1], t[2] + depth * w[2]])
    }

    /// World point to `(u, v, depth)`; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let t = self.translation;
        let c = mat_t_vec(&self.rotation, [p[0] - t[0], p[1] - t[1], p[2] - t[2]]);
        if c[2] <= 1e-9 {
            return None;
        }
        let k = self.intrinsics;
        Some((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self { intrinsics, ..*self }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let r = &self.rotation;
        let k = self.intrinsics;
        serde_json::to_value(PoseJson {
            r: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            t: self.translation,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        })
        .expect("plain numbers serialize")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let p: PoseJson = serde_json::from_value(v.clone())?;
        let r = p.r;
        Self::new(
            [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            p.t,
            Intrinsics { fx: p.fx, fy: p.fy, cx: p.cx, cy: p.cy },
        )
    }
}

fn r_col(r: &Mat3, j: usize) -> Vec3 {
    [r[0][j], r[1][j], r[2][j]]
}

/// Voxel lattice. `dims` and `voxel_size` are ordered `(Z, X, Y)`; `origin`
/// is the world `(x, y, z)` of the grid's minimum corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub origin: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], origin: Vec3) -> Result<Self> {
        if dims.contains(&0) || voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(NfError::InvalidArgument(format!(
                "grid dims {dims:?} and voxel size {voxel_size:?} must be positive"
            )));
        }
        Ok(Self { dims, voxel_size, origin })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// World extent in `(Z, X, Y)` order.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.voxel_size[a])
    }

    /// Continuous lattice coordinates `(z, x, y)` in voxel units of a world point.
    pub fn to_lattice(&self, p: Vec3) -> [f64; 3] {
        [
            (p[2] - self.origin[2]) / self.voxel_size[0],
            (p[0] - self.origin[0]) / self.voxel_size[1],
            (p[1] - self.origin[1]) / self.voxel_size[2],
        ]
    }

    /// World position of a voxel center.
    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        [
            self.origin[0] + (idx[1] as f64 + 0.5) * self.voxel_size[1],
            self.origin[1] + (idx[2] as f64 + 0.5) * self.voxel_size[2],
            self.origin[2] + (idx[0] as f64 + 0.5) * self.voxel_size[0],
        ]
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn world_to_voxel(&self, p: Vec3) -> Option<[usize; 3]> {
        world_to_voxel(p, self)
    }
}

/// Floor-rule voxel index `(z, x, y)`; points on the maximum faces or outside
/// are `None`.
pub fn world_to_voxel(p: Vec3, spec: &GridSpec) -> Option<[usize; 3]> {
    let l = spec.to_lattice(p);
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let f = l[a].floor();
        if !(f >= 0.0 && f < spec.dims[a] as f64) {
            return None;
        }
        idx[a] = f as usize;
    }
    Some(idx)
}

/// Discrete metric depths along the optical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBins {
    depths: Vec<f64>,
    deltas: Vec<f64>,
}

impl DepthBins {
    /// `d` evenly spaced depths from `near` to `far` inclusive; the last delta
    /// repeats the previous one.
    pub fn uniform(near: f64, far: f64, d: usize) -> Result<Self> {
        if !(near > 0.0 && far > near) || d < 2 {
            return Err(NfError::InvalidArgument(format!(
                "depth bins need 0 < near < far and d >= 2 (near {near}, far {far}, d {d})"
            )));
        }
        let step = (far - near) / (d - 1) as f64;
        Self::from_depths((0..d).map(|j| near + step * j as f64).collect())
    }

    pub fn from_depths(depths: Vec<f64>) -> Result<Self> {
        if depths.is_empty()
            || depths[0] <= 0.0
            || depths.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(NfError::InvalidArgument("depths must be positive and strictly increasing".into()));
        }
        let mut deltas: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
        deltas.push(deltas.last().copied().unwrap_or(1.0));
        Ok(Self { depths, deltas })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_pose(t: Vec3, k: Intrinsics) -> CameraPose {
        CameraPose::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t, k).unwrap()
    }

    const K: Intrinsics = Intrinsics { fx: 1.0, fy: 1.0, cx: 16.0, cy: 16.0 };

    #[test]
    fn principal_ray_is_optical_axis() {
        let (o, d) = identity_pose([0.5, 1.0, 2.0], K).ray_for_pixel(16.0, 16.0);
        assert_eq!(o, [0.5, 1.0, 2.0]);
        assert_eq!(d, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn off_axis_ray_and_mirror_symmetry() {
        let pose = identity_pose([0.0; 3], K);
        let (_, d) = pose.ray_for_pixel(17.0, 16.0);
        let s = 0.5f64.sqrt();
        assert!((d[0] - s).abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] - s).abs() < 1e-12);
        let (_, l) = pose.ray_for_pixel(13.0, 14.0);
        let (_, r) = pose.ray_for_pixel(19.0, 14.0);
        assert!((l[0] + r[0]).abs() < 1e-12 && (l[1] - r[1]).abs() < 1e-12);
        assert!((dot(d, d).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lift_pixel_examples() {
        let p = identity_pose([0.0; 3], K).lift_pixel(16.0, 16.0, 2.0).unwrap();
        assert_eq!(p, [0.0, 0.0, 2.0]);
        let p = identity_pose([1.0, 0.0, 0.0], K).lift_pixel(16.0, 16.0, 2.0).unwrap();
        assert_eq!(p, [1.0, 0.0, 2.0]);
        // quarter turn about the vertical, checked against the explicit matrix product
        let r = rot_z(std::f64::consts::FRAC_PI_2);
        let pose = CameraPose::new(r, [0.0; 3], K).unwrap();
        let p = pose.lift_pixel(18.0, 15.0, 3.0).unwrap();
        let cam = [2.0 * 3.0, -1.0 * 3.0, 3.0];
        let expect = [-cam[1], cam[0], cam[2]];
        for a in 0..3 {
            assert!((p[a] - expect[a]).abs() < 1e-12);
        }
        assert!(pose.lift_pixel(16.0, 16.0, 0.0).is_err());
    }

    #[test]
    fn project_inverts_lift() {
        let k = Intrinsics::from_fov(32, 32, 1.5);
        let pose = CameraPose::from_yaw_pitch([0.3, -0.2, 1.5], 0.7, 0.25, k);
        pose.validate().unwrap();
        let p = pose.lift_pixel(5.5, 20.5, 4.0).unwrap();
        let (u, v, d) = pose.project(p).unwrap();
        assert!((u - 5.5).abs() < 1e-9 && (v - 20.5).abs() < 1e-9 && (d - 4.0).abs() < 1e-9);
    }

    #[test]
    fn world_to_voxel_rules() {
        let spec = GridSpec::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(world_to_voxel([2.0, 2.0, 2.0], &spec), Some([2, 2, 2]));
        assert_eq!(world_to_voxel([1.5, 2.5, 0.5], &spec), Some([0, 1, 2]));
        assert_eq!(world_to_voxel([5.0, 1.0, 1.0], &spec), None);
        assert_eq!(world_to_voxel([4.0, 1.0, 1.0], &spec), None);
        assert_eq!(world_to_voxel([-1e-12, 1.0, 1.0], &spec), None);
        // boundary between x-cells 0 and 1 belongs to the cell with lower corner 1
        assert_eq!(world_to_voxel([1.0, 0.5, 0.5], &spec), Some([0, 1, 0]));
    }

    #[test]
    fn translation_consistency() {
        let k = Intrinsics::from_fov(16, 16, 1.4);
        let spec = GridSpec::new([8, 16, 16], [0.5; 3], [-4.0, -4.0, -0.5]).unwrap();
        let pose = CameraPose::from_yaw_pitch([0.1, 0.2, 1.5], 1.1, 0.3, k);
        let shift = [10.25, -3.5, 2.0];
        let moved = CameraPose { translation: [0.1 + shift[0], 0.2 + shift[1], 1.5 + shift[2]], ..pose };
        let mspec = GridSpec { origin: [-4.0 + shift[0], -4.0 + shift[1], -0.5 + shift[2]], ..spec };
        for (u, v, d) in [(3.5, 7.5, 2.0), (8.0, 8.0, 3.3), (12.5, 1.5, 1.1)] {
            let a = world_to_voxel(pose.lift_pixel(u, v, d).unwrap(), &spec);
            let b = world_to_voxel(moved.lift_pixel(u, v, d).unwrap(), &mspec);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn depth_bins_and_json() {
        let b = DepthBins::uniform(1.0, 4.0, 4).unwrap();
        assert_eq!(b.depths(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.deltas(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(DepthBins::from_depths(vec![1.0, 1.0]).is_err());
        let k = Intrinsics::from_fov(32, 32, 1.5);
        let pose = CameraPose::from_yaw_pitch([1.0, 2.0, 3.0], 0.4, 0.2, k);
        let back = CameraPose::from_json(&pose.to_json()).unwrap();
        assert_eq!(back, pose);
        let bad = CameraPose::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]], [0.0; 3], k);
        assert!(bad.is_err());
    }
}
