//! Marching cubes on a label indicator.
//!
//! Each cube is polygonized by tracing iso-segments on its six faces and
//! linking them into closed loops. Shared faces are resolved by the same
//! face-local rule (asymptotic decider) from both sides, and vertices are
//! welded by grid-edge key, so the output is closed and manifold.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SurfaceMesh;
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Vec3};

const ISO: f64 = 0.5;

/// Scalar field the isosurface is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsoPolicy {
    /// The 0/1 indicator itself.
    Binary,
    /// Indicator smoothed once by the separable kernel `[1, 3, 1] / 5`.
    /// Values have denominator 125, so none lands exactly on the isovalue.
    #[default]
    Smoothed,
}

/// Corners of each face, counter-clockwise seen from outside the cube.
/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

/// Cube edge id for two corners differing in one bit.
fn edge_id(a: usize, b: usize) -> usize {
    let lo = a.min(b);
    let axis = (a ^ b).trailing_zeros() as usize;
    // Remaining two bits of the lower corner, packed.
    let rest: Vec<usize> = (0..3).filter(|&x| x != axis).map(|x| (lo >> x) & 1).collect();
    axis * 4 + rest[0] + 2 * rest[1]
}

/// Lower corner and axis of a cube edge.
fn edge_corner_axis(e: usize) -> (usize, usize) {
    let axis = e / 4;
    let r = e % 4;
    let others: Vec<usize> = (0..3).filter(|&x| x != axis).collect();
    ((r & 1) << others[0] | ((r >> 1) & 1) << others[1], axis)
}

/// The two faces containing a cube edge.
fn edge_faces(e: usize) -> [usize; 2] {
    let (lo, axis) = edge_corner_axis(e);
    let mut f = [0; 2];
    for (n, x) in (0..3).filter(|&x| x != axis).enumerate() {
        f[n] = 2 * x + ((lo >> x) & 1);
    }
    f
}

/// Scalar samples padded by one zero voxel on every side.
struct Padded {
    dims: [usize; 3],
    values: Vec<f64>,
    grid: Grid,
}

impl Padded {
    fn new(labels: &LabelVolume, target: u8, policy: IsoPolicy) -> Self {
        let g = labels.grid;
        let [nx, ny, nz] = g.dims;
        let ind = |i: i64, j: i64, k: i64| -> f64 {
            if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
                0.0
            } else if labels.at(i as usize, j as usize, k as usize) == target {
                1.0
            } else {
                0.0
            }
        };
        const W: [f64; 2] = [3.0, 1.0];
        let dims = [nx + 2, ny + 2, nz + 2];
        let values = (0..dims[0] * dims[1] * dims[2])
            .into_par_iter()
            .map(|idx| {
                let i = (idx % dims[0]) as i64 - 1;
                let j = ((idx / dims[0]) % dims[1]) as i64 - 1;
                let k = (idx / (dims[0] * dims[1])) as i64 - 1;
                match policy {
                    IsoPolicy::Binary => ind(i, j, k),
                    IsoPolicy::Smoothed => {
                        let mut s = 0.0;
                        for dk in -1..=1i64 {
                            for dj in -1..=1i64 {
                                for di in -1..=1i64 {
                                    s += W[di.unsigned_abs() as usize]
                                        * W[dj.unsigned_abs() as usize]
                                        * W[dk.unsigned_abs() as usize]
                                        * ind(i + di, j + dj, k + dk);
                                }
                            }
                        }
                        s / 125.0
                    }
                }
            })
            .collect();
        Self { dims, values, grid: g }
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let g = &self.grid;
        Vec3::new(
            g.origin[0] + (i as f64 - 1.0) * g.spacing[0],
            g.origin[1] + (j as f64 - 1.0) * g.spacing[1],
            g.origin[2] + (k as f64 - 1.0) * g.spacing[2],
        )
    }
}

/// Key of a welded vertex: a grid edge, or a loop centroid private to a cube.
type Key = u64;

fn edge_key(p: &Padded, corner: [usize; 3], axis: usize) -> Key {
    (p.index(corner[0], corner[1], corner[2]) as u64) * 4 + axis as u64
}

fn centroid_key(p: &Padded, cube: [usize; 3], loop_no: usize) -> Key {
    // Loops per cube are at most 4; room for them after the edge keys.
    let n = (p.dims[0] * p.dims[1] * p.dims[2]) as u64;
    n * 4 + (p.index(cube[0], cube[1], cube[2]) as u64) * 4 + loop_no as u64
}

struct SlabOutput {
    triangles: Vec<[Key; 3]>,
    positions: HashMap<Key, Vec3>,
}

fn polygonize_cube(p: &Padded, cube: [usize; 3], out: &mut SlabOutput) {
    let corner_pos = |c: usize| [cube[0] + (c & 1), cube[1] + ((c >> 1) & 1), cube[2] + ((c >> 2) & 1)];
    let v: [f64; 8] = std::array::from_fn(|c| {
        let q = corner_pos(c);
        p.values[p.index(q[0], q[1], q[2])]
    });
    let inside: [bool; 8] = std::array::from_fn(|c| v[c] > ISO);
    if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
        return;
    }

    // Directed segments on faces, keyed by start edge; inside lies to the
    // right of each segment seen from outside the cube.
    let mut next: [Option<usize>; 12] = [None; 12];
    for face in &FACES {
        let mut crossings: Vec<(usize, bool)> = Vec::with_capacity(4);
        for i in 0..4 {
            let (a, b) = (face[i], face[(i + 1) % 4]);
            if inside[a] != inside[b] {
                crossings.push((edge_id(a, b), inside[b]));
            }
        }
        let join = crossings.len() == 4 && {
            let [a, b, c, d] = face.map(|k| v[k]);
            let saddle = (a * c - b * d) / (a + c - b - d);
            saddle > ISO
        };
        let n = crossings.len();
        for (i, &(e, enter)) in crossings.iter().enumerate() {
            if enter {
                let partner = if join { crossings[(i + n - 1) % n].0 } else { crossings[(i + 1) % n].0 };
                next[e] = Some(partner);
            }
        }
    }

    let point = |e: usize| -> (Key, Vec3) {
        let (lo, axis) = edge_corner_axis(e);
        let hi = lo | (1 << axis);
        let (qa, qb) = (corner_pos(lo), corner_pos(hi));
        let t = (ISO - v[lo]) / (v[hi] - v[lo]);
        let pa = p.position(qa[0], qa[1], qa[2]);
        let pb = p.position(qb[0], qb[1], qb[2]);
        (edge_key(p, qa, axis), pa + (pb - pa) * t)
    };

    let mut visited = [false; 12];
    let mut loop_no = 0;
    for start in 0..12 {
        if visited[start] || next[start].is_none() {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            lp.push(e);
            e = next[e].expect("closed loop");
        }
        let pts: Vec<(Key, Vec3)> = lp.iter().map(|&e| point(e)).collect();
        for (k, x) in &pts {
            out.positions.insert(*k, *x);
        }
        let k = lp.len();
        if k == 3 {
            out.triangles.push([pts[0].0, pts[1].0, pts[2].0]);
            continue;
        }
        let fan = (0..k).find(|&i| {
            let fi = edge_faces(lp[i]);
            (0..k)
                .filter(|&j| j != i && j != (i + 1) % k && j != (i + k - 1) % k)
                .all(|j| {
                    let fj = edge_faces(lp[j]);
                    !fi.iter().any(|f| fj.contains(f))
                })
        });
        match fan {
            Some(i) => {
                for s in 1..k - 1 {
                    out.triangles.push([pts[i].0, pts[(i + s) % k].0, pts[(i + s + 1) % k].0]);
                }
            }
            None => {
                let c = pts.iter().fold(Vec3::zeros(), |acc, (_, x)| acc + x) / k as f64;
                let ck = centroid_key(p, cube, loop_no);
                out.positions.insert(ck, c);
                for s in 0..k {
                    out.triangles.push([ck, pts[s].0, pts[(s + 1) % k].0]);
                }
            }
        }
        loop_no += 1;
    }
}

/// Closed, outward-oriented surface of `labels == target` at isovalue 0.5,
/// with vertices in physical mm.
pub fn marching_cubes(labels: &LabelVolume, target: u8, policy: IsoPolicy) -> Result<SurfaceMesh> {
    if labels.count(target) == 0 {
        return Err(Error::Empty(format!("no voxel carries label {target}")));
    }
    let p = Padded::new(labels, target, policy);
    let cubes = [p.dims[0] - 1, p.dims[1] - 1, p.dims[2] - 1];
    let slabs: Vec<SlabOutput> = (0..cubes[2])
        .into_par_iter()
        .map(|k| {
            let mut out = SlabOutput {
                triangles: Vec::new(),
                positions: HashMap::new(),
            };
            for j in 0..cubes[1] {
                for i in 0..cubes[0] {
                    polygonize_cube(&p, [i, j, k], &mut out);
                }
            }
            out
        })
        .collect();

    let mut ids: HashMap<Key, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for slab in &slabs {
        for t in &slab.triangles {
            triangles.push(t.map(|key| {
                *ids.entry(key).or_insert_with(|| {
                    vertices.push(slab.positions[&key]);
                    vertices.len() - 1
                })
            }));
        }
    }
    let mesh = SurfaceMesh::new(vertices, triangles, 0);
    mesh.check_watertight()?;
    Ok(mesh)
}
