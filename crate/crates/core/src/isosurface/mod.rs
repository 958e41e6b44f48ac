//! Triangulated surfaces: extraction, simplification and propagation.

mod decimate;
mod mc;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use decimate::decimate;
pub use mc::{marching_cubes, IsoPolicy};

use crate::error::{Error, Result};
use crate::geom::{triangle_area, triangle_normal, Aabb};
use crate::register::DisplacementField;
use crate::volume::Vec3;

/// Triangles below this area (mm²) count as degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

/// Default vertex budget for decimated surfaces.
pub const DEFAULT_TARGET_VERTICES: usize = 2500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMesh {
    /// Positions in mm.
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[usize; 3]>,
    pub frame_id: usize,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, frame_id: usize) -> Self {
        Self {
            vertices,
            triangles,
            frame_id,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Undirected edges with their use counts, sorted.
    pub fn edges(&self) -> Vec<([usize; 2], usize)> {
        let mut m: HashMap<[usize; 2], usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *m.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        let mut v: Vec<_> = m.into_iter().collect();
        v.sort_unstable();
        v
    }

    /// Every undirected edge used by exactly two triangles, in opposite
    /// directions.
    pub fn check_watertight(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::NotWatertight("mesh has no triangles".into()));
        }
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            if t.iter().any(|&i| i >= self.vertices.len()) {
                return Err(Error::NotWatertight(format!("triangle {t:?} references a missing vertex")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::NotWatertight(format!("triangle {t:?} repeats a vertex")));
            }
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_insert(0) += 1;
            }
        }
        let mut bad: Vec<_> = directed
            .iter()
            .filter(|(&(a, b), &n)| n != 1 || directed.get(&(b, a)) != Some(&1))
            .map(|(&e, _)| e)
            .collect();
        if !bad.is_empty() {
            bad.sort_unstable();
            return Err(Error::NotWatertight(format!(
                "{} directed edges lack a unique opposite, first {:?}",
                bad.len(),
                bad[0]
            )));
        }
        Ok(())
    }

    pub fn is_watertight(&self) -> bool {
        self.check_watertight().is_ok()
    }

    /// Enclosed volume by the divergence theorem; positive for outward
    /// orientation.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }

    fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        triangle_area(&self.vertices[t[0]], &self.vertices[t[1]], &self.vertices[t[2]])
    }

    pub fn min_triangle_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).fold(f64::INFINITY, f64::min)
    }

    /// Unnormalized normal of triangle `t` (length is twice its area).
    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        triangle_normal(&a, &b, &c)
    }

    /// V − E + F over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edges().len() as i64 + self.triangles.len() as i64
    }

    /// Connected components of the triangle set (by shared vertices).
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for e in 0..3 {
                used[t[e]] = true;
                let (a, b) = (find(&mut parent, t[e]), find(&mut parent, t[(e + 1) % 3]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..self.vertices.len()).filter(|&i| used[i] && find(&mut parent, i) == i).count()
    }

    /// Total genus of a closed orientable surface: `(2C − χ) / 2`.
    pub fn genus(&self) -> i64 {
        (2 * self.component_count() as i64 - self.euler_characteristic()) / 2
    }

    pub fn mean_edge_length(&self) -> f64 {
        let e = self.edges();
        if e.is_empty() {
            return 0.0;
        }
        e.iter().map(|(k, _)| (self.vertices[k[0]] - self.vertices[k[1]]).norm()).sum::<f64>() / e.len() as f64
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    /// Checks watertightness, positive orientation and triangle areas.
    pub fn validate(&self) -> Result<()> {
        self.check_watertight()?;
        let v = self.signed_volume();
        if !(v > 0.0) {
            return Err(Error::Invariant(format!("surface signed volume {v} is not positive")));
        }
        let a = self.min_triangle_area();
        if !(a > MIN_TRIANGLE_AREA) {
            return Err(Error::Invariant(format!("degenerate triangle with area {a:e} mm²")));
        }
        Ok(())
    }

    /// Applies `f` to every vertex, keeping connectivity.
    pub fn map_vertices<F: Fn(&Vec3) -> Vec3 + Sync + Send>(&self, f: F) -> SurfaceMesh {
        SurfaceMesh {
            vertices: self.vertices.par_iter().map(f).collect(),
            triangles: self.triangles.clone(),
            frame_id: self.frame_id,
        }
    }
}

/// Result of [`propagate_surface`].
#[derive(Clone, Debug)]
pub struct Propagated {
    pub mesh: SurfaceMesh,
    /// Vertices that fell outside the field grid and were sampled at the
    /// clamped edge value.
    pub clamped: usize,
}

/// Moves each vertex by the trilinearly sampled field: `v' = v + u(v)`.
pub fn propagate_surface(mesh: &SurfaceMesh, field: &DisplacementField, frame_id: usize) -> Propagated {
    let clamped = mesh.vertices.iter().filter(|v| !field.grid.contains(v)).count();
    let mut out = mesh.map_vertices(|v| field.apply(v));
    out.frame_id = frame_id;
    Propagated { mesh: out, clamped }
}
