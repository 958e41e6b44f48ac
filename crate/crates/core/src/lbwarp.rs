//! Volume-mesh warping onto a moved boundary.
//!
//! Each interior vertex is expressed as an inverse-distance weighted average
//! of its edge neighbours at end-diastole. Given new boundary positions, the
//! interior is recovered by solving `x_i - Σ_j w_ij x_j = 0` for the
//! interior unknowns, one coordinate at a time.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isosurface::SurfaceMesh;
use crate::tetmesh::{assess, QualityReport, TetMesh};
use crate::volume::Vec3;

/// Relative residual at which the iterative solve stops.
pub const TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 10_000;
/// Systems smaller than this fall back to a dense solve if the iterative
/// one fails.
pub const DENSE_LIMIT: usize = 3000;

/// Row-stochastic neighbour weights of the interior vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteriorWeights {
    /// Mesh vertex id of each interior vertex.
    pub interior: Vec<usize>,
    /// Per interior vertex: (mesh vertex id, weight), sorted by id.
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// `(1/d_j) / Σ_k (1/d_k)`; on a coincident neighbour returns its position.
pub fn inverse_distance_weights(center: &Vec3, neighbours: &[Vec3]) -> std::result::Result<Vec<f64>, usize> {
    let mut inv = Vec::with_capacity(neighbours.len());
    for (k, p) in neighbours.iter().enumerate() {
        let d = (center - p).norm();
        if d == 0.0 {
            return Err(k);
        }
        inv.push(1.0 / d);
    }
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}

pub fn compute_weights(mesh: &TetMesh) -> Result<InteriorWeights> {
    let interior = mesh.interior_vertices();
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); mesh.vertices.len()];
    for [a, b] in mesh.edges() {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let rows = interior
        .par_iter()
        .map(|&i| {
            let n = &nbrs[i];
            if n.is_empty() {
                return Err(Error::Warp(format!("interior vertex {i} has no neighbours")));
            }
            let pts: Vec<Vec3> = n.iter().map(|&j| mesh.vertices[j]).collect();
            let w = inverse_distance_weights(&mesh.vertices[i], &pts)
                .map_err(|k| Error::Warp(format!("zero-length edge between vertices {i} and {}", n[k])))?;
            let mut row: Vec<(usize, f64)> = n.iter().copied().zip(w).collect();
            row.sort_by_key(|&(j, _)| j);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InteriorWeights { interior, rows })
}

impl InteriorWeights {
    /// Largest `|x_i - Σ_j w_ij x_j|` at the given positions; zero when the
    /// weights reproduce them exactly.
    pub fn reproduction_residual(&self, vertices: &[Vec3]) -> f64 {
        self.interior
            .iter()
            .zip(&self.rows)
            .map(|(&i, row)| {
                let avg: Vec3 = row.iter().map(|&(j, w)| vertices[j] * w).sum();
                (vertices[i] - avg).norm()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    BiCgStab,
    DenseLu,
    /// No interior unknowns.
    None,
}

/// Result of [`warp`].
#[derive(Clone, Debug)]
pub struct Warped {
    pub mesh: TetMesh,
    pub quality: QualityReport,
    pub solver: Solver,
    /// Iterations per coordinate (zero for the dense solve).
    pub iterations: [usize; 3],
    /// Relative residual `|b - Mx| / |b|` per coordinate.
    pub residual: [f64; 3],
}

/// Interior system `M x = b` in compressed rows over interior unknowns.
struct System {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl System {
    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|r| {
                (self.offsets[r]..self.offsets[r + 1])
                    .map(|k| self.vals[k] * x[self.cols[k]])
                    .sum()
            })
            .collect()
    }

    fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for r in 0..n {
            for k in self.offsets[r]..self.offsets[r + 1] {
                m[(r, self.cols[k])] += self.vals[k];
            }
        }
        m
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn relative_residual(m: &System, x: &[f64], b: &[f64]) -> f64 {
    let mx = m.apply(x);
    let r: Vec<f64> = b.iter().zip(&mx).map(|(b, y)| b - y).collect();
    let nb = norm(b);
    if nb == 0.0 {
        norm(&r)
    } else {
        norm(&r) / nb
    }
}

/// BiCGSTAB from a zero start. Returns the solution and iteration count, or
/// `None` on breakdown or when the cap is reached.
fn bicgstab(m: &System, b: &[f64]) -> Option<(Vec<f64>, usize)> {
    let n = b.len();
    let nb = norm(b);
    let mut x = vec![0.0; n];
    if nb == 0.0 {
        return Some((x, 0));
    }
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=MAX_ITERATIONS {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return None;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        v = m.apply(&p);
        let den = dot(&r0, &v);
        if den == 0.0 {
            return None;
        }
        alpha = rho / den;
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm(&s) / nb < TOLERANCE {
            let half: Vec<f64> = (0..n).map(|i| x[i] + alpha * p[i]).collect();
            if relative_residual(m, &half, b) < TOLERANCE {
                return Some((half, it));
            }
        }
        let t = m.apply(&s);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return None;
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p[i] + omega * s[i];
            r[i] = s[i] - omega * t[i];
        }
        // The recursive residual drifts; confirm against the true one.
        if norm(&r) / nb < TOLERANCE && relative_residual(m, &x, b) < TOLERANCE {
            return Some((x, it));
        }
    }
    None
}

/// Places the boundary exactly at `target` (through `boundary_map`) and
/// solves for the interior.
pub fn warp(mesh: &TetMesh, weights: &InteriorWeights, target: &SurfaceMesh, frame_id: usize) -> Result<Warped> {
    if target.vertices.len() != mesh.boundary_map.len() {
        return Err(Error::Correspondence(format!(
            "target surface has {} vertices, mesh boundary has {}",
            target.vertices.len(),
            mesh.boundary_map.len()
        )));
    }
    let mut vertices = mesh.vertices.clone();
    for (s, &v) in mesh.boundary_map.iter().enumerate() {
        vertices[v] = target.vertices[s];
    }

    let mut unknown = vec![usize::MAX; mesh.vertices.len()];
    for (k, &i) in weights.interior.iter().enumerate() {
        unknown[i] = k;
    }
    let n = weights.interior.len();
    check_boundary_contact(weights, &unknown)?;

    let mut offsets = vec![0];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut rhs = vec![Vec3::zeros(); n];
    for (k, row) in weights.rows.iter().enumerate() {
        cols.push(k);
        vals.push(1.0);
        for &(j, w) in row {
            if unknown[j] == usize::MAX {
                rhs[k] += vertices[j] * w;
            } else {
                cols.push(unknown[j]);
                vals.push(-w);
            }
        }
        offsets.push(cols.len());
    }
    let system = System { offsets, cols, vals };

    let mut solver = if n == 0 { Solver::None } else { Solver::BiCgStab };
    let mut iterations = [0; 3];
    let mut solution: [Vec<f64>; 3] = Default::default();
    let b: [Vec<f64>; 3] = std::array::from_fn(|a| rhs.iter().map(|v| v[a]).collect());
    for a in 0..3 {
        match bicgstab(&system, &b[a]) {
            Some((x, it)) => {
                solution[a] = x;
                iterations[a] = it;
            }
            None => {
                solver = Solver::DenseLu;
                break;
            }
        }
    }
    if solver == Solver::DenseLu {
        if n >= DENSE_LIMIT {
            return Err(Error::Warp(format!(
                "iterative solve did not reach {TOLERANCE:e} within {MAX_ITERATIONS} iterations"
            )));
        }
        let lu = system.dense().lu();
        for a in 0..3 {
            let col = nalgebra::DVector::from_column_slice(&b[a]);
            let x = lu
                .solve(&col)
                .ok_or_else(|| Error::Warp("interior system is singular".into()))?;
            solution[a] = x.iter().copied().collect();
        }
        iterations = [0; 3];
    }
    let residual: [f64; 3] = std::array::from_fn(|a| {
        if n == 0 {
            0.0
        } else {
            relative_residual(&system, &solution[a], &b[a])
        }
    });
    for (k, &i) in weights.interior.iter().enumerate() {
        vertices[i] = Vec3::new(solution[0][k], solution[1][k], solution[2][k]);
    }
    let out = TetMesh {
        vertices,
        tets: mesh.tets.clone(),
        boundary_map: mesh.boundary_map.clone(),
        frame_id,
    };
    let quality = assess(&out);
    Ok(Warped {
        mesh: out,
        quality,
        solver,
        iterations,
        residual,
    })
}

/// Every interior vertex must reach the boundary through interior edges,
/// otherwise the system is singular.
fn check_boundary_contact(weights: &InteriorWeights, unknown: &[usize]) -> Result<()> {
    let n = weights.interior.len();
    let mut reached = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n)
        .filter(|&k| weights.rows[k].iter().any(|&(j, _)| unknown[j] == usize::MAX))
        .collect();
    for &k in &queue {
        reached[k] = true;
    }
    // Weights are symmetric in support, so walking rows is walking edges.
    while let Some(k) = queue.pop_front() {
        for &(j, _) in &weights.rows[k] {
            let u = unknown[j];
            if u != usize::MAX && !reached[u] {
                reached[u] = true;
                queue.push_back(u);
            }
        }
    }
    match reached.iter().position(|r| !r) {
        Some(k) => Err(Error::Warp(format!(
            "interior vertex {} has no path to the boundary; the system is singular",
            weights.interior[k]
        ))),
        None => Ok(()),
    }
}
