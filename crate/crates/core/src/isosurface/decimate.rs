//! Quadric-error edge collapse.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use nalgebra::{Matrix3, Matrix4, Vector4};

use super::{SurfaceMesh, MIN_TRIANGLE_AREA};
use crate::volume::Vec3;

type Quadric = Matrix4<f64>;

#[derive(Debug)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
    stamp: [u64; 2],
    target: Vec3,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Reversed so the max-heap pops the cheapest collapse first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

struct State {
    pos: Vec<Vec3>,
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
    incident: Vec<Vec<usize>>,
    quadric: Vec<Quadric>,
    stamp: Vec<u64>,
    removed: Vec<bool>,
}

fn plane_quadric(a: &Vec3, b: &Vec3, c: &Vec3) -> Quadric {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len == 0.0 {
        return Quadric::zeros();
    }
    let u = n / len;
    let p = Vector4::new(u.x, u.y, u.z, -u.dot(a));
    // Area weighting.
    p * p.transpose() * (0.5 * len)
}

fn quadric_cost(q: &Quadric, x: &Vec3) -> f64 {
    let h = Vector4::new(x.x, x.y, x.z, 1.0);
    (h.transpose() * q * h)[0].max(0.0)
}

impl State {
    fn new(mesh: &SurfaceMesh) -> Self {
        let n = mesh.vertices.len();
        let mut incident = vec![Vec::new(); n];
        let mut quadric = vec![Quadric::zeros(); n];
        for (f, t) in mesh.triangles.iter().enumerate() {
            let q = plane_quadric(&mesh.vertices[t[0]], &mesh.vertices[t[1]], &mesh.vertices[t[2]]);
            for &v in t {
                incident[v].push(f);
                quadric[v] += q;
            }
        }
        Self {
            pos: mesh.vertices.clone(),
            tris: mesh.triangles.clone(),
            alive: vec![true; mesh.triangles.len()],
            incident,
            quadric,
            stamp: vec![0; n],
            removed: vec![false; n],
        }
    }

    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.incident[v]
            .iter()
            .flat_map(|&f| self.tris[f])
            .filter(|&w| w != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let (a, b) = (a.min(b), a.max(b));
        let q = self.quadric[a] + self.quadric[b];
        let m: Matrix3<f64> = q.fixed_view::<3, 3>(0, 0).into();
        let rhs = -Vec3::new(q[(0, 3)], q[(1, 3)], q[(2, 3)]);
        let scale = m.trace().abs() / 3.0;
        let mut best: Option<(f64, Vec3)> = None;
        if scale > 0.0 && m.determinant().abs() > 1e-9 * scale.powi(3) {
            if let Some(x) = m.lu().solve(&rhs) {
                // Keep the optimum near the edge so a flat region cannot
                // fling the vertex far away.
                let len = (self.pos[a] - self.pos[b]).norm();
                let mid = (self.pos[a] + self.pos[b]) * 0.5;
                if (x - mid).norm() <= 2.0 * len {
                    best = Some((quadric_cost(&q, &x), x));
                }
            }
        }
        if best.is_none() {
            for x in [self.pos[a], self.pos[b], (self.pos[a] + self.pos[b]) * 0.5] {
                let c = quadric_cost(&q, &x);
                if best.is_none_or(|(bc, _)| c < bc) {
                    best = Some((c, x));
                }
            }
        }
        let (cost, target) = best.unwrap();
        Candidate {
            cost,
            a,
            b,
            stamp: [self.stamp[a], self.stamp[b]],
            target,
        }
    }

    /// Link condition plus the checks that keep every neighbour of degree
    /// at least three and no face flipped or degenerate.
    fn is_legal(&self, c: &Candidate) -> bool {
        let (a, b) = (c.a, c.b);
        let na = self.neighbors(a);
        let nb = self.neighbors(b);
        let shared: Vec<usize> = na.iter().copied().filter(|v| nb.binary_search(v).is_ok()).collect();
        let opposite: HashSet<usize> = self.incident[a]
            .iter()
            .filter(|&&f| self.tris[f].contains(&b))
            .flat_map(|&f| self.tris[f])
            .filter(|&v| v != a && v != b)
            .collect();
        if shared.len() != 2 || opposite.len() != 2 || !shared.iter().all(|v| opposite.contains(v)) {
            return false;
        }
        if shared.iter().any(|&v| self.neighbors(v).len() <= 3) {
            return false;
        }
        // The merged vertex must keep degree >= 3.
        if na.len() + nb.len() - 4 < 3 {
            return false;
        }
        for &v in &[a, b] {
            for &f in &self.incident[v] {
                let t = self.tris[f];
                if t.contains(&a) && t.contains(&b) {
                    continue;
                }
                let p = t.map(|w| self.pos[w]);
                let q = t.map(|w| if w == a || w == b { c.target } else { self.pos[w] });
                let before = (p[1] - p[0]).cross(&(p[2] - p[0]));
                let after = (q[1] - q[0]).cross(&(q[2] - q[0]));
                if 0.5 * after.norm() <= MIN_TRIANGLE_AREA || before.dot(&after) <= 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Merges `b` into `a` at the candidate position.
    fn collapse(&mut self, c: &Candidate) {
        let (a, b) = (c.a, c.b);
        let faces_b = std::mem::take(&mut self.incident[b]);
        for f in faces_b {
            if self.tris[f].contains(&a) {
                self.alive[f] = false;
                for v in self.tris[f] {
                    if v != b {
                        self.incident[v].retain(|&g| g != f);
                    }
                }
            } else {
                for w in self.tris[f].iter_mut() {
                    if *w == b {
                        *w = a;
                    }
                }
                self.incident[a].push(f);
            }
        }
        self.incident[a].sort_unstable();
        self.pos[a] = c.target;
        self.quadric[a] = self.quadric[a] + self.quadric[b];
        self.removed[b] = true;
        self.stamp[a] += 1;
        self.stamp[b] += 1;
    }

    fn is_current(&self, c: &Candidate) -> bool {
        !self.removed[c.a] && !self.removed[c.b] && c.stamp == [self.stamp[c.a], self.stamp[c.b]]
    }
}

/// Collapses edges in order of quadric error until `target` vertices remain
/// or no legal collapse is left. Connectivity changes never alter topology;
/// collapses that would flip a face or make it degenerate are skipped.
pub fn decimate(mesh: &SurfaceMesh, target: usize) -> SurfaceMesh {
    let target = target.max(4);
    if mesh.vertices.len() <= target {
        return mesh.clone();
    }
    let mut s = State::new(mesh);
    let mut heap = BinaryHeap::new();
    for ([a, b], _) in mesh.edges() {
        heap.push(s.candidate(a, b));
    }
    let mut count = mesh.vertices.len();
    // Rejected candidates are dropped; edges around a collapse are re-queued.
    while count > target {
        let Some(c) = heap.pop() else { break };
        if !s.is_current(&c) || !s.is_legal(&c) {
            continue;
        }
        s.collapse(&c);
        count -= 1;
        for w in s.neighbors(c.a) {
            heap.push(s.candidate(c.a, w));
        }
    }

    let mut remap = vec![usize::MAX; s.pos.len()];
    let mut vertices = Vec::with_capacity(count);
    for (v, &gone) in s.removed.iter().enumerate() {
        if !gone {
            remap[v] = vertices.len();
            vertices.push(s.pos[v]);
        }
    }
    let triangles = s
        .tris
        .iter()
        .zip(&s.alive)
        .filter(|(_, &alive)| alive)
        .map(|(t, _)| t.map(|v| remap[v]))
        .collect();
    SurfaceMesh::new(vertices, triangles, mesh.frame_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::point_triangle_distance;
    use crate::isosurface::{marching_cubes, IsoPolicy};
    use crate::volume::{Grid, LabelVolume};
    use proptest::prelude::*;

    fn labels_from(dims: [usize; 3], f: impl Fn(Vec3) -> bool) -> LabelVolume {
        let g = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let data = (0..g.len()).map(|i| f(g.point_of(i)) as u8).collect();
        LabelVolume::new(g, data).unwrap()
    }

    fn sphere() -> SurfaceMesh {
        let c = Vec3::repeat(13.2);
        let l = labels_from([27; 3], |p| (p - c).norm() <= 10.0);
        marching_cubes(&l, 1, IsoPolicy::default()).unwrap()
    }

    fn torus() -> SurfaceMesh {
        let c = Vec3::new(15.1, 15.3, 6.2);
        let l = labels_from([31, 31, 13], |p| {
            let d = p - c;
            let ring = (d.x * d.x + d.y * d.y).sqrt() - 9.0;
            ring * ring + d.z * d.z <= 9.0
        });
        marching_cubes(&l, 1, IsoPolicy::default()).unwrap()
    }

    /// Largest distance from any vertex or triangle centroid of `a` to the
    /// surface `b`, by brute force.
    fn one_sided(a: &SurfaceMesh, b: &SurfaceMesh) -> f64 {
        let mut probes = a.vertices.clone();
        probes.extend(a.triangles.iter().map(|t| (a.vertices[t[0]] + a.vertices[t[1]] + a.vertices[t[2]]) / 3.0));
        probes
            .iter()
            .map(|p| {
                b.triangles
                    .iter()
                    .map(|t| point_triangle_distance(p, &b.vertices[t[0]], &b.vertices[t[1]], &b.vertices[t[2]]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn target_at_current_count_is_identity() {
        let m = sphere();
        assert_eq!(decimate(&m, m.vertex_count()), m);
        assert_eq!(decimate(&m, m.vertex_count() + 10), m);
    }

    #[test]
    fn sphere_quarter_stays_close() {
        let m = sphere();
        let d = decimate(&m, m.vertex_count() / 4);
        assert_eq!(d.vertex_count(), m.vertex_count() / 4);
        d.validate().unwrap();
        assert_eq!(d.genus(), 0);
        let h = one_sided(&m, &d).max(one_sided(&d, &m));
        let bound = 2.0 * m.mean_edge_length();
        assert!(h < bound, "hausdorff {h} vs {bound}");
    }

    #[test]
    fn torus_keeps_genus_and_orientation() {
        let m = torus();
        assert_eq!(m.genus(), 1);
        let d = decimate(&m, m.vertex_count() / 5);
        d.validate().unwrap();
        assert_eq!(d.genus(), 1);
        assert!(d.signed_volume() > 0.0);
    }

    #[test]
    fn aggressive_target_stops_at_a_valid_mesh() {
        let d = decimate(&sphere(), 4);
        d.validate().unwrap();
        assert_eq!(d.genus(), 0);
        assert!(d.vertex_count() >= 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_blobs_keep_invariants(
            bits in proptest::collection::vec(0u8..2, 6 * 6 * 6),
            keep in 0.1f64..0.9,
        ) {
            let g = Grid::new([6, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
            let l = LabelVolume::new(g, bits).unwrap();
            prop_assume!(l.count(1) > 0);
            let m = marching_cubes(&l, 1, IsoPolicy::default()).unwrap();
            let d = decimate(&m, (m.vertex_count() as f64 * keep) as usize);
            prop_assert!(d.validate().is_ok(), "{:?}", d.validate());
            prop_assert!(d.genus() <= m.genus());
            prop_assert_eq!(d.component_count(), m.component_count());
        }
    }
}
