//! Small computational-geometry kernels shared by the mesh modules.

use crate::volume::Vec3;

#[inline]
pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Non-normalized normal `(b - a) × (c - a)`.
#[inline]
pub fn triangle_normal(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    (b - a).cross(&(c - a))
}

/// Signed volume `det[b-a, c-a, d-a] / 6`.
#[inline]
pub fn tet_signed_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).dot(&(c - a).cross(&(d - a))) / 6.0
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[inline]
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a, I: IntoIterator<Item = &'a Vec3>>(pts: I) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|a| self.min[a] > self.max[a])
    }
}

/// Uniform-grid index over triangles answering exact nearest-distance
/// queries.
pub struct TriangleIndex<'a> {
    vertices: &'a [Vec3],
    triangles: &'a [[usize; 3]],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> TriangleIndex<'a> {
    pub fn new(vertices: &'a [Vec3], triangles: &'a [[usize; 3]]) -> Self {
        let bbox = Aabb::from_points(triangles.iter().flat_map(|t| t.iter().map(|&i| &vertices[i])));
        let ext = if bbox.is_empty() { Vec3::repeat(1.0) } else { bbox.max - bbox.min };
        // Aim for a few triangles per occupied cell.
        let target = (triangles.len().max(1) as f64 / 2.0).cbrt().max(1.0);
        let cell = (ext.max() / target).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(512));
        let origin = if bbox.is_empty() { Vec3::zeros() } else { bbox.min };
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut idx = Self {
            vertices,
            triangles,
            origin,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (ti, t) in triangles.iter().enumerate() {
            let tb = Aabb::from_points(t.iter().map(|&i| &vertices[i]));
            let lo = idx.cell_of(&tb.min);
            let hi = idx.cell_of(&tb.max);
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        cells[i + dims[0] * (j + dims[1] * k)].push(ti as u32);
                    }
                }
            }
        }
        idx.cells = cells;
        idx
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn tri_distance(&self, p: &Vec3, ti: usize) -> f64 {
        let [a, b, c] = self.triangles[ti];
        point_triangle_distance(p, &self.vertices[a], &self.vertices[b], &self.vertices[c])
    }

    /// Exact distance from `p` to the nearest triangle.
    pub fn distance(&self, p: &Vec3) -> f64 {
        if self.triangles.is_empty() {
            return f64::INFINITY;
        }
        let c = self.cell_of(p);
        // Distance from p to the indexed box; rings below it contain nothing closer.
        let mut outside = 0.0f64;
        for a in 0..3 {
            let lo = self.origin[a];
            let hi = self.origin[a] + self.dims[a] as f64 * self.cell;
            let d = if p[a] < lo {
                lo - p[a]
            } else if p[a] > hi {
                p[a] - hi
            } else {
                0.0
            };
            outside += d * d;
        }
        let outside = outside.sqrt();
        let max_ring = *self.dims.iter().max().expect("3 dims");
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            // Triangles not yet seen lie at least r-1 cells away.
            if best <= outside.max(r.saturating_sub(1) as f64 * self.cell) {
                break;
            }
            let r = r as i64;
            for dk in -r..=r {
                for dj in -r..=r {
                    for di in -r..=r {
                        if di.abs().max(dj.abs()).max(dk.abs()) != r {
                            continue;
                        }
                        let q = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= self.dims[a] as i64) {
                            continue;
                        }
                        let ci = q[0] as usize + self.dims[0] * (q[1] as usize + self.dims[1] * q[2] as usize);
                        for &ti in &self.cells[ci] {
                            best = best.min(self.tri_distance(p, ti as usize));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Fixed sub-voxel offset applied to ray origins so that rays almost surely
/// avoid mesh edges and vertices.
const RAY_JITTER: [f64; 2] = [1.234_567_9e-7, 2.718_281_8e-7];

/// Point-in-closed-surface classification by counting crossings of a
/// vertical ray, with triangles binned over the xy-plane.
pub struct InsideTester<'a> {
    vertices: &'a [Vec3],
    triangles: &'a [[usize; 3]],
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    bins: Vec<Vec<u32>>,
    jitter: [f64; 2],
}

impl<'a> InsideTester<'a> {
    pub fn new(vertices: &'a [Vec3], triangles: &'a [[usize; 3]]) -> Self {
        let bbox = Aabb::from_points(triangles.iter().flat_map(|t| t.iter().map(|&i| &vertices[i])));
        let scale = if bbox.is_empty() { 1.0 } else { bbox.diagonal().max(1e-12) };
        let (origin, ext) = if bbox.is_empty() {
            ([0.0; 2], [1.0; 2])
        } else {
            ([bbox.min.x, bbox.min.y], [bbox.max.x - bbox.min.x, bbox.max.y - bbox.min.y])
        };
        let target = (triangles.len().max(1) as f64 / 4.0).sqrt().max(1.0);
        let cell = (ext[0].max(ext[1]) / target).max(1e-9);
        let dims = [0, 1].map(|a| ((ext[a] / cell).floor() as usize + 1).min(1024));
        let mut bins = vec![Vec::new(); dims[0] * dims[1]];
        let cell_of = |x: f64, a: usize| (((x - origin[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1);
        for (ti, t) in triangles.iter().enumerate() {
            let tb = Aabb::from_points(t.iter().map(|&i| &vertices[i]));
            for j in cell_of(tb.min.y, 1)..=cell_of(tb.max.y, 1) {
                for i in cell_of(tb.min.x, 0)..=cell_of(tb.max.x, 0) {
                    bins[i + dims[0] * j].push(ti as u32);
                }
            }
        }
        Self {
            vertices,
            triangles,
            origin,
            cell,
            dims,
            bins,
            jitter: [RAY_JITTER[0] * scale, RAY_JITTER[1] * scale],
        }
    }

    /// Heights at which the vertical line through `(x, y)` (jittered) crosses
    /// the surface, sorted ascending.
    pub fn crossings(&self, x: f64, y: f64) -> Vec<f64> {
        let (x, y) = (x + self.jitter[0], y + self.jitter[1]);
        let ci = (x - self.origin[0]) / self.cell;
        let cj = (y - self.origin[1]) / self.cell;
        if ci < 0.0 || cj < 0.0 || ci >= self.dims[0] as f64 || cj >= self.dims[1] as f64 {
            return Vec::new();
        }
        let bin = &self.bins[ci as usize + self.dims[0] * cj as usize];
        let mut zs: Vec<f64> = bin
            .iter()
            .filter_map(|&ti| {
                let [a, b, c] = self.triangles[ti as usize];
                vertical_hit(x, y, &self.vertices[a], &self.vertices[b], &self.vertices[c])
            })
            .collect();
        zs.sort_by(|a, b| a.total_cmp(b));
        zs
    }

    /// Odd number of surface crossings above `p`.
    pub fn contains(&self, p: &Vec3) -> bool {
        self.crossings(p.x, p.y).iter().filter(|&&z| z > p.z).count() % 2 == 1
    }
}

/// Height where the vertical line through `(x, y)` meets triangle `abc`,
/// using a half-open edge rule so shared edges are counted once.
fn vertical_hit(x: f64, y: f64, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e = |p: &Vec3, q: &Vec3| (q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x);
    let w0 = e(b, c);
    let w1 = e(c, a);
    let w2 = e(a, b);
    let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
    let sum = w0 + w1 + w2;
    if !inside || sum == 0.0 {
        return None;
    }
    Some((w0 * a.z + w1 * b.z + w2 * c.z) / sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Distance by minimizing over a dense barycentric sampling, refined.
    fn sampled_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let u = i as f64 / n as f64;
                let v = j as f64 / n as f64;
                let q = a + (b - a) * u + (c - a) * v;
                best = best.min((p - q).norm());
            }
        }
        best
    }

    #[test]
    fn closest_point_regions() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(point_triangle_distance(&Vec3::new(0.2, 0.2, 3.0), &a, &b, &c), 3.0);
        assert_eq!(point_triangle_distance(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c), 2f64.sqrt());
        assert!((point_triangle_distance(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(point_triangle_distance(&Vec3::new(0.5, -2.0, 0.0), &a, &b, &c), 2.0);
    }

    proptest! {
        #[test]
        fn closest_point_matches_sampling(
            pts in proptest::collection::vec(-2.0f64..2.0, 12)
        ) {
            let v: Vec<Vec3> = pts.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            prop_assume!(triangle_area(&v[1], &v[2], &v[3]) > 1e-2);
            let d = point_triangle_distance(&v[0], &v[1], &v[2], &v[3]);
            let s = sampled_distance(&v[0], &v[1], &v[2], &v[3]);
            // Sampling only over-estimates, by at most the lattice resolution.
            prop_assert!(d <= s + 1e-12);
            prop_assert!(s - d < 0.02);
        }
    }

    fn cube() -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let v = (0..8)
            .map(|c| Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64))
            .collect();
        let t = vec![
            [0, 2, 3], [0, 3, 1], [4, 5, 7], [4, 7, 6], [0, 1, 5], [0, 5, 4],
            [2, 6, 7], [2, 7, 3], [0, 4, 6], [0, 6, 2], [1, 3, 7], [1, 7, 5],
        ];
        (v, t)
    }

    #[test]
    fn inside_test_on_cube() {
        let (v, t) = cube();
        let it = InsideTester::new(&v, &t);
        assert!(it.contains(&Vec3::new(0.5, 0.5, 0.5)));
        assert!(it.contains(&Vec3::new(0.01, 0.99, 0.5)));
        assert!(!it.contains(&Vec3::new(1.5, 0.5, 0.5)));
        assert!(!it.contains(&Vec3::new(0.5, 0.5, -0.1)));
        // A vertical line through the shared diagonal of two triangles.
        assert!(it.contains(&Vec3::new(0.5, 0.5, 0.25)));
    }

    #[test]
    fn index_distance_matches_brute_force() {
        let (v, t) = cube();
        let idx = TriangleIndex::new(&v, &t);
        for p in [Vec3::new(0.5, 0.5, 0.5), Vec3::new(3.0, -1.0, 0.2), Vec3::new(0.3, 0.9, 1.7)] {
            let brute = t
                .iter()
                .map(|tr| point_triangle_distance(&p, &v[tr[0]], &v[tr[1]], &v[tr[2]]))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(idx.distance(&p), brute);
        }
    }
}
