use nfldm::camera::GridSpec;
use nfldm::geometry::{marching_cubes, pad_field, read_ply, write_ply, Mesh, CORNERS};
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};

fn sphere_field(n: usize, r: f64) -> (Vec<f32>, GridSpec) {
    let spec = GridSpec::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap();
    let c = n as f64 / 2.0;
    let mut d = vec![0.0; n * n * n];
    for z in 0..n {
        for x in 0..n {
            for y in 0..n {
                let p = spec.voxel_center([z, x, y]);
                let dist = ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt();
                d[spec.flat_index([z, x, y])] = (r - dist) as f32;
            }
        }
    }
    (d, spec)
}

#[test]
fn sphere_is_closed_with_euler_characteristic_two() {
    let (d, spec) = sphere_field(16, 5.0);
    let mesh = marching_cubes(&d, 0.0, &spec).unwrap();
    mesh.validate().unwrap();
    assert!(mesh.triangles.len() > 100);
    assert!(mesh.is_closed_manifold());
    assert_eq!(mesh.euler_characteristic(), 2);
    for v in &mesh.vertices {
        let r = ((v[0] - 8.0).powi(2) + (v[1] - 8.0).powi(2) + (v[2] - 8.0).powi(2)).sqrt();
        assert!((r - 5.0).abs() < 0.3, "vertex radius {r}");
    }
}

#[test]
fn every_single_corner_case_gives_one_triangle() {
    let spec = GridSpec::new([2, 2, 2], [0.5; 3], [1.0, 2.0, 3.0]).unwrap();
    for c in 0..8 {
        let mut d = vec![0.0; 8];
        let [x, y, z] = CORNERS[c];
        d[spec.flat_index([z, x, y])] = 1.0;
        let mesh = marching_cubes(&d, 0.5, &spec).unwrap();
        assert_eq!(mesh.triangles.len(), 1, "corner {c}");
        assert_eq!(mesh.vertices.len(), 3);
        // midpoints of the three edges leaving the hot corner
        let hot = spec.voxel_center([z, x, y]);
        for v in &mesh.vertices {
            let off: f64 = (0..3).map(|k| (v[k] as f64 - hot[k]).abs()).sum();
            assert!((off - 0.25).abs() < 1e-6);
        }
    }
}

#[test]
fn vertices_lie_on_straddling_edges() {
    let (d, spec) = sphere_field(12, 3.7);
    let mesh = marching_cubes(&d, 0.0, &spec).unwrap();
    for v in &mesh.vertices {
        // on a unit lattice offset by 0.5, exactly two coordinates are voxel centers
        let on_lattice = v.iter().filter(|c| ((*c - 0.5) - (*c - 0.5).round()).abs() < 1e-5).count();
        assert!(on_lattice >= 2, "{v:?}");
    }
}

#[test]
fn ply_roundtrip_and_reference_parser() {
    let dir = tempfile::tempdir().unwrap();
    let (d, spec) = sphere_field(16, 5.0);
    let mesh = marching_cubes(&d, 0.0, &spec).unwrap();
    let path = dir.path().join("sphere.ply");
    write_ply(&mesh, &path).unwrap();
    let back = read_ply(&path).unwrap();
    assert_eq!(back.triangles, mesh.triangles);
    for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
        assert_eq!(a, b);
    }

    let mut f = std::fs::File::open(&path).unwrap();
    let ply = Parser::<DefaultElement>::new().read_ply(&mut f).unwrap();
    assert_eq!(ply.payload["vertex"].len(), mesh.vertices.len());
    let faces = &ply.payload["face"];
    assert_eq!(faces.len(), mesh.triangles.len());
    match &faces[0]["vertex_indices"] {
        Property::ListInt(v) => assert_eq!(v.iter().map(|&i| i as u32).collect::<Vec<_>>(), mesh.triangles[0]),
        other => panic!("unexpected property {other:?}"),
    }

    let empty = dir.path().join("empty.ply");
    write_ply(&Mesh::default(), &empty).unwrap();
    let mut f = std::fs::File::open(&empty).unwrap();
    let ply = Parser::<DefaultElement>::new().read_ply(&mut f).unwrap();
    assert_eq!(ply.header.elements["vertex"].count, 0);
    assert!(read_ply(&empty).unwrap().triangles.is_empty());
}

#[test]
fn padding_closes_surfaces_cut_by_the_boundary() {
    // a half-space slab fills the bottom layers and touches four faces
    let spec = GridSpec::new([6, 5, 5], [0.5; 3], [1.0, 2.0, 0.0]).unwrap();
    let d: Vec<f32> = (0..spec.num_voxels()).map(|i| if i / 25 < 2 { 1.0 } else { 0.0 }).collect();
    let open = marching_cubes(&d, 0.5, &spec).unwrap();
    assert!(!open.is_closed_manifold());
    let (padded, pspec) = pad_field(&d, &spec, 0.0).unwrap();
    assert_eq!(pspec.dims, [8, 7, 7]);
    assert_eq!(pspec.voxel_center([1, 1, 1]), spec.voxel_center([0, 0, 0]));
    let closed = marching_cubes(&padded, 0.5, &pspec).unwrap();
    assert!(closed.is_closed_manifold());
    assert_eq!(closed.euler_characteristic(), 2);
}
