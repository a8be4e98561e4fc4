use nfldm::camera::{CameraPose, GridSpec, Intrinsics};
use nfldm::render::render_rays;
use nfldm::rng::seeded;
use nfldm::scene_encoder::{occupancy_weights, VoxelGrid};
use rand::Rng;

#[test]
fn occupancy_plus_transmittance_is_one() {
    let mut rng = seeded(11);
    for _ in 0..2000 {
        let d = rng.gen_range(1..24);
        let sigma: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..5.0)).collect();
        let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
        let o = occupancy_weights(&sigma, &delta).unwrap();
        let tau: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        let total = o.iter().sum::<f64>() + (-tau).exp();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }
}

/// A 1x1 camera at the origin looking down +x through voxel centers.
fn axis_ray() -> CameraPose {
    CameraPose::from_yaw_pitch([0.0; 3], 0.0, 0.0, Intrinsics::from_fov(1, 1, 0.5))
}

fn slab_grid(density: impl Fn(usize) -> f32) -> VoxelGrid {
    let spec = GridSpec::new([3, 32, 3], [0.25; 3], [0.0, -0.375, -0.375]).unwrap();
    let mut grid = VoxelGrid::empty(spec, 1);
    for z in 0..3 {
        for x in 0..32 {
            for y in 0..3 {
                grid.density.data_mut()[spec.flat_index([z, x, y])] = density(x);
            }
        }
    }
    grid
}

#[test]
fn unit_optical_depth_box() {
    // four unit-density centers 0.25 apart: the piecewise-linear field integrates to 1
    let grid = slab_grid(|x| if (8..12).contains(&x) { 1.0 } else { 0.0 });
    let out = render_rays(&grid, &axis_ray(), 256, 0.5, 7.5).unwrap();
    let t = out.background_transmittance.data()[0] as f64;
    assert!((t - (-1.0f64).exp()).abs() < 1e-2, "{t}");
}

#[test]
fn opaque_slab_depth() {
    let s = 1000.0;
    let grid = slab_grid(|x| if x >= 12 { s } else { 0.0 });
    let (near, far, n) = (0.5, 7.5, 256);
    let out = render_rays(&grid, &axis_ray(), n, near, far).unwrap();
    // density ramps linearly from 0 at x0 over one voxel; the continuous field
    // gives T(x) = exp(-S (x - x0)^2 / 2h) and E[depth] = x0 + sqrt(pi h / 2S)
    let (x0, h) = (2.875, 0.25);
    let expected = x0 + (std::f64::consts::PI * h / (2.0 * s as f64)).sqrt();
    let spacing = (far - near) / n as f64;
    let d = out.expected_depth.data()[0] as f64;
    assert!((d - expected).abs() < spacing, "{d} vs {expected}");
    assert!(out.background_transmittance.data()[0] < 1e-6);
}
