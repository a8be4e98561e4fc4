//! Marching-cubes isosurfaces of density grids and ASCII PLY export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::camera::{GridSpec, Vec3};
use crate::{NfError, Result};

/// Cube corners as (x, y, z) offsets.
pub const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Cube edges as corner pairs.
pub const EDGES: [[usize; 2]; 12] =
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Faces as corner cycles, counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [[0, 3, 2, 1], [4, 5, 6, 7], [0, 1, 5, 4], [3, 7, 6, 2], [0, 4, 7, 3], [1, 2, 6, 5]];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES.iter().position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a)).expect("adjacent corners")
}

/// Bit `i` of a case index is set when corner `i` is above the iso level.
pub fn edge_mask(case: usize) -> u16 {
    EDGES
        .iter()
        .enumerate()
        .filter(|(_, e)| ((case >> e[0]) & 1) != ((case >> e[1]) & 1))
        .fold(0, |m, (i, _)| m | (1 << i))
}

/// Triangles (as edge triples) of one cube configuration. On every face the
/// iso-line cuts off each run of above-iso corners separately, so neighbouring
/// cells always agree on the shared face and the surface closes up.
fn triangulate_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| (case >> c) & 1 == 1;
    let mut next: HashMap<usize, usize> = HashMap::new();
    for face in FACES {
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if !inside(a) && inside(b) {
                // walk the run of inside corners to the edge where it exits
                let mut j = (k + 1) % 4;
                while inside(face[(j + 1) % 4]) {
                    j = (j + 1) % 4;
                }
                let enter = edge_between(a, b);
                let exit = edge_between(face[j], face[(j + 1) % 4]);
                next.insert(exit, enter);
            }
        }
    }
    let mut tris = Vec::new();
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut used = [false; 12];
    for s in starts {
        if used[s] {
            continue;
        }
        let mut lp = vec![s];
        used[s] = true;
        let mut e = next[&s];
        while e != s {
            used[e] = true;
            lp.push(e);
            e = next[&e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[i] as u8, lp[i + 1] as u8]);
        }
    }
    tris
}

/// The 256-case triangle table.
pub fn triangle_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_case).collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(NfError::Format(format!("invalid triangle {t:?} for {n} vertices")));
            }
        }
        Ok(())
    }

    /// V - E + F, counting each undirected edge once.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles with opposite
    /// orientation.
    pub fn is_closed_manifold(&self) -> bool {
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed.iter().all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }
}

/// Surrounds a `[Z, X, Y]` field with one layer of `fill` so that surfaces
/// touching the lattice boundary come out closed.
pub fn pad_field(density: &[f32], spec: &GridSpec, fill: f32) -> Result<(Vec<f32>, GridSpec)> {
    let [nz, nx, ny] = spec.dims;
    if density.len() != nz * nx * ny {
        return Err(NfError::InvalidArgument(format!("density has {} values for grid {:?}", density.len(), spec.dims)));
    }
    let [vz, vx, vy] = spec.voxel_size;
    let origin = [spec.origin[0] - vx, spec.origin[1] - vy, spec.origin[2] - vz];
    let padded = GridSpec::new([nz + 2, nx + 2, ny + 2], spec.voxel_size, origin)?;
    let mut out = vec![fill; padded.num_voxels()];
    for z in 0..nz {
        for x in 0..nx {
            let src = spec.flat_index([z, x, 0]);
            let dst = padded.flat_index([z + 1, x + 1, 1]);
            out[dst..dst + ny].copy_from_slice(&density[src..src + ny]);
        }
    }
    Ok((out, padded))
}

/// Extracts the `iso` surface of a `[Z, X, Y]` density grid sampled at voxel
/// centers. Vertices are shared between cells and ordered by first use.
pub fn marching_cubes(density: &[f32], iso: f32, spec: &GridSpec) -> Result<Mesh> {
    let [nz, nx, ny] = spec.dims;
    if density.len() != nz * nx * ny {
        return Err(NfError::InvalidArgument(format!(
            "density has {} values, grid {:?} needs {}",
            density.len(),
            spec.dims,
            nz * nx * ny
        )));
    }
    let mut mesh = Mesh::default();
    if nz < 2 || nx < 2 || ny < 2 {
        return Ok(mesh);
    }
    let table = triangle_table();
    let mut vertex_of: HashMap<(usize, usize), u32> = HashMap::new();
    // corner offset (x, y, z) maps to lattice (z, x, y)
    let lattice = |z: usize, x: usize, y: usize, c: usize| [z + CORNERS[c][2], x + CORNERS[c][0], y + CORNERS[c][1]];
    for z in 0..nz - 1 {
        for x in 0..nx - 1 {
            for y in 0..ny - 1 {
                let vals: [f32; 8] = std::array::from_fn(|c| density[spec.flat_index(lattice(z, x, y, c))]);
                let case = (0..8).filter(|&c| vals[c] > iso).fold(0, |m, c| m | (1 << c));
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in tris {
                    let mut idx = [0u32; 3];
                    for (k, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let [a, b] = EDGES[e];
                            let (la, lb) = (lattice(z, x, y, a), lattice(z, x, y, b));
                            let (ka, kb) = (spec.flat_index(la), spec.flat_index(lb));
                            let key = (ka.min(kb), ka.max(kb));
                            local[e] = *vertex_of.entry(key).or_insert_with(|| {
                                let t = ((iso - vals[a]) / (vals[b] - vals[a])).clamp(0.0, 1.0) as f64;
                                let (pa, pb) = (spec.voxel_center(la), spec.voxel_center(lb));
                                let p: Vec3 = std::array::from_fn(|i| pa[i] + t * (pb[i] - pa[i]));
                                mesh.vertices.push(p.map(|v| v as f32));
                                (mesh.vertices.len() - 1) as u32
                            });
                        }
                        idx[k] = local[e];
                    }
                    if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
                        mesh.triangles.push(idx);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

pub fn ply_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    let _ = writeln!(s, "property float x\nproperty float y\nproperty float z");
    let _ = writeln!(s, "element face {}", mesh.triangles.len());
    let _ = writeln!(s, "property list uchar int vertex_indices\nend_header");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    s
}

pub fn write_ply(mesh: &Mesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    std::fs::write(path, ply_string(mesh))?;
    Ok(())
}

/// Minimal reader for the files written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| NfError::Format(format!("{}: {m}", path.display()));
    let (header, body) = text.split_once("end_header\n").ok_or_else(|| bad("missing end_header"))?;
    let count = |name: &str| -> Result<usize> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(&format!("element {name} ")))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| bad(&format!("missing element {name}")))
    };
    let (nv, nf) = (count("vertex")?, count("face")?);
    let mut lines = body.lines();
    let mut mesh = Mesh::default();
    for _ in 0..nv {
        let l = lines.next().ok_or_else(|| bad("truncated vertices"))?;
        let v: Vec<f32> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(l))?;
        mesh.vertices.push(v.try_into().map_err(|_| bad(l))?);
    }
    for _ in 0..nf {
        let l = lines.next().ok_or_else(|| bad("truncated faces"))?;
        let v: Vec<u32> = l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(l))?;
        if v.len() != 4 || v[0] != 3 {
            return Err(bad(l));
        }
        mesh.triangles.push([v[1], v[2], v[3]]);
    }
    mesh.validate()?;
    Ok(mesh)
}
