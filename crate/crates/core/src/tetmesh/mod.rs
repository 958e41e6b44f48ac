//! Tetrahedral volume meshes of the myocardium: generation, quality and
//! propagation.

mod delaunay;

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{tet_signed_volume, Aabb, InsideTester, TriangleIndex};
use crate::isosurface::SurfaceMesh;
use crate::register::DisplacementField;
use crate::volume::Vec3;

use delaunay::{Delaunay, TET_FACES};

/// Default element volume bound (mm³).
pub const DEFAULT_MAX_VOLUME: f64 = 9.0;

/// Elements touching the boundary may exceed the volume bound by this factor.
pub const VOLUME_TOLERANCE: f64 = 1.5;

/// Scaled Jacobian at or above which an element counts as acceptable.
pub const ACCEPTABLE_JACOBIAN: f64 = 0.2;

/// Steiner points closer than this fraction of the lattice spacing to the
/// surface are dropped.
const STEINER_MARGIN: f64 = 0.35;

/// Refinement centroids may sit this close to the surface, in lattice
/// spacings.
const REFINE_MARGIN: f64 = 0.05;

/// Rebuilds with Steiner points removed near unrepairable spots.
const RETRIES: usize = 6;

/// Rounds of centroid insertion into oversized elements.
const REFINE_ROUNDS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TetMesh {
    pub vertices: Vec<Vec3>,
    /// Positively oriented index quadruples.
    pub tets: Vec<[usize; 4]>,
    /// Surface vertex id to mesh vertex id.
    pub boundary_map: Vec<usize>,
    pub frame_id: usize,
}

impl TetMesh {
    pub fn tet_points(&self, t: usize) -> [Vec3; 4] {
        self.tets[t].map(|v| self.vertices[v])
    }

    pub fn volumes(&self) -> Vec<f64> {
        (0..self.tets.len())
            .into_par_iter()
            .map(|t| {
                let [a, b, c, d] = self.tet_points(t);
                tet_signed_volume(&a, &b, &c, &d)
            })
            .collect()
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes().iter().sum()
    }

    /// Faces used by exactly one tet, oriented outward, sorted.
    pub fn boundary_faces(&self) -> Vec<[usize; 3]> {
        let mut seen: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
        for t in &self.tets {
            for f in TET_FACES {
                let face = f.map(|i| t[i]);
                let mut key = face;
                key.sort_unstable();
                seen.entry(key).and_modify(|e| e.0 += 1).or_insert((1, face));
            }
        }
        let mut out: Vec<[usize; 3]> = seen.into_values().filter(|(n, _)| *n == 1).map(|(_, f)| f).collect();
        out.sort_unstable();
        out
    }

    /// The boundary as a surface over the full vertex array.
    pub fn boundary_surface(&self) -> SurfaceMesh {
        SurfaceMesh::new(self.vertices.clone(), self.boundary_faces(), self.frame_id)
    }

    /// Flags for vertices on a boundary face.
    pub fn boundary_flags(&self) -> Vec<bool> {
        let mut on = vec![false; self.vertices.len()];
        for f in self.boundary_faces() {
            for v in f {
                on[v] = true;
            }
        }
        on
    }

    /// Checks positive volumes, a watertight boundary and that
    /// `boundary_map` is a bijection onto the boundary vertices.
    pub fn validate(&self) -> Result<()> {
        if let Some((t, v)) = self.volumes().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Invariant(format!("tet {t} has volume {v}")));
        }
        self.boundary_surface().check_watertight()?;
        let on = self.boundary_flags();
        let mut mapped = vec![false; self.vertices.len()];
        for (s, &v) in self.boundary_map.iter().enumerate() {
            if v >= self.vertices.len() || !on[v] {
                return Err(Error::Invariant(format!("surface vertex {s} maps to non-boundary vertex {v}")));
            }
            if std::mem::replace(&mut mapped[v], true) {
                return Err(Error::Invariant(format!("vertex {v} mapped twice")));
            }
        }
        let unmapped = on.iter().zip(&mapped).filter(|(&o, &m)| o && !m).count();
        if unmapped > 0 {
            return Err(Error::Invariant(format!("{unmapped} boundary vertices have no surface vertex")));
        }
        Ok(())
    }

    /// Vertices not in `boundary_map`, ascending.
    pub fn interior_vertices(&self) -> Vec<usize> {
        let mut b = vec![false; self.vertices.len()];
        for &v in &self.boundary_map {
            b[v] = true;
        }
        (0..self.vertices.len()).filter(|&v| !b[v]).collect()
    }

    /// Undirected edges, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut e: Vec<[usize; 2]> = self
            .tets
            .iter()
            .flat_map(|t| {
                [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)].map(|(i, j)| [t[i].min(t[j]), t[i].max(t[j])])
            })
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// Corner-minimum of `det[e1, e2, e3] / (|e1| |e2| |e3|)`, scaled so the
/// regular tetrahedron scores 1. Zero when two vertices coincide.
pub fn scaled_jacobian(p: &[Vec3; 4]) -> f64 {
    let six_v = 6.0 * tet_signed_volume(&p[0], &p[1], &p[2], &p[3]);
    let mut len = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            len[i][j] = (p[i] - p[j]).norm();
        }
    }
    let mut worst = f64::INFINITY;
    for i in 0..4 {
        let denom: f64 = (0..4).filter(|&j| j != i).map(|j| len[i][j]).product();
        if denom == 0.0 {
            return 0.0;
        }
        worst = worst.min(six_v / denom);
    }
    (worst / std::f64::consts::FRAC_1_SQRT_2).clamp(-1.0, 1.0)
}

/// True when two vertices coincide.
pub fn is_degenerate(p: &[Vec3; 4]) -> bool {
    (0..4).any(|i| (i + 1..4).any(|j| p[i] == p[j]))
}

pub fn circumcenter(p: &[Vec3; 4]) -> Option<Vec3> {
    let [d1, d2, d3] = [p[1] - p[0], p[2] - p[0], p[3] - p[0]];
    let det = d1.dot(&d2.cross(&d3));
    if det == 0.0 {
        return None;
    }
    let n = d2.cross(&d3) * d1.norm_squared() + d3.cross(&d1) * d2.norm_squared() + d1.cross(&d2) * d3.norm_squared();
    Some(p[0] + n / (2.0 * det))
}

/// Circumradius over shortest edge; infinite for a flat tet.
pub fn radius_edge(p: &[Vec3; 4]) -> f64 {
    let Some(c) = circumcenter(p) else {
        return f64::INFINITY;
    };
    let shortest = (0..4)
        .flat_map(|i| (i + 1..4).map(move |j| (i, j)))
        .map(|(i, j)| (p[i] - p[j]).norm())
        .fold(f64::INFINITY, f64::min);
    if shortest == 0.0 {
        return f64::INFINITY;
    }
    (c - p[0]).norm() / shortest
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub scaled_jacobian: Vec<f64>,
    pub radius_edge: Vec<f64>,
    pub min_scaled_jacobian: f64,
    pub mean_scaled_jacobian: f64,
    /// Fraction of elements with scaled Jacobian at least 0.2.
    pub fraction_acceptable: f64,
    /// Elements with scaled Jacobian ≤ 0.
    pub nonpositive: usize,
    pub mean_radius_edge: f64,
    pub max_volume: f64,
    pub valid: bool,
}

pub fn assess(mesh: &TetMesh) -> QualityReport {
    let n = mesh.tets.len();
    let per: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|t| {
            let p = mesh.tet_points(t);
            (scaled_jacobian(&p), radius_edge(&p), tet_signed_volume(&p[0], &p[1], &p[2], &p[3]))
        })
        .collect();
    let sj: Vec<f64> = per.iter().map(|x| x.0).collect();
    let re: Vec<f64> = per.iter().map(|x| x.1).collect();
    let nonpositive = sj.iter().filter(|&&s| s <= 0.0).count();
    let denom = n.max(1) as f64;
    QualityReport {
        min_scaled_jacobian: sj.iter().copied().fold(f64::INFINITY, f64::min),
        mean_scaled_jacobian: sj.iter().sum::<f64>() / denom,
        fraction_acceptable: sj.iter().filter(|&&s| s >= ACCEPTABLE_JACOBIAN).count() as f64 / denom,
        nonpositive,
        mean_radius_edge: re.iter().sum::<f64>() / denom,
        max_volume: per.iter().map(|x| x.2).fold(f64::NEG_INFINITY, f64::max),
        valid: nonpositive == 0 && n > 0,
        scaled_jacobian: sj,
        radius_edge: re,
    }
}

/// Result of [`propagate_volume`].
#[derive(Clone, Debug)]
pub struct PropagatedVolume {
    pub mesh: TetMesh,
    pub quality: QualityReport,
    /// Vertices outside the field grid.
    pub clamped: usize,
}

/// Moves every vertex by the sampled field; connectivity is unchanged and
/// inverted elements are reported, not removed.
pub fn propagate_volume(mesh: &TetMesh, field: &DisplacementField, frame_id: usize) -> PropagatedVolume {
    let clamped = mesh.vertices.iter().filter(|v| !field.grid.contains(v)).count();
    let out = TetMesh {
        vertices: mesh.vertices.par_iter().map(|v| field.apply(v)).collect(),
        tets: mesh.tets.clone(),
        boundary_map: mesh.boundary_map.clone(),
        frame_id,
    };
    let quality = assess(&out);
    PropagatedVolume {
        mesh: out,
        quality,
        clamped,
    }
}

/// Interleaved 10-bit Morton code of a point within `bbox`.
fn morton(p: &Vec3, bbox: &Aabb) -> u64 {
    let ext = bbox.max - bbox.min;
    let mut code = 0u64;
    let q = [0, 1, 2].map(|a| {
        let f = if ext[a] > 0.0 { (p[a] - bbox.min[a]) / ext[a] } else { 0.0 };
        ((f * 1023.0).round() as u64).min(1023)
    });
    for bit in 0..10 {
        for (a, v) in q.iter().enumerate() {
            code |= ((v >> bit) & 1) << (3 * bit + a);
        }
    }
    code
}

/// Body-centred cubic lattice points with spacing `h` covering `bbox`.
fn bcc_lattice(bbox: &Aabb, h: f64) -> Vec<Vec3> {
    let n = [0, 1, 2].map(|a| ((bbox.max[a] - bbox.min[a]) / h).ceil() as usize + 1);
    let mut out = Vec::new();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let corner = bbox.min + Vec3::new(i as f64, j as f64, k as f64) * h;
                out.push(corner);
                out.push(corner + Vec3::repeat(0.5 * h));
            }
        }
    }
    out
}

/// Rounds of boundary repair after carving.
const REPAIR_ROUNDS: usize = 40;

/// Fixes the carved set where it is not a clean volume: a Steiner point
/// (index `>= surface_count`) on the boundary gets its whole star, a
/// surface vertex buried inside loses its shallowest tet, and where more
/// than two boundary sheets meet at an edge every gap in the ring of tets
/// around it except the largest is filled.
fn repair(
    all: &[[usize; 4]],
    keep: &mut [bool],
    points: &[Vec3],
    surface_count: usize,
    dist: &TriangleIndex,
) -> std::result::Result<(), Vec<usize>> {
    let mut ring: HashMap<[usize; 2], Vec<usize>> = HashMap::new();
    let mut star: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (i, t) in all.iter().enumerate() {
        for &v in t {
            star[v].push(i);
        }
        for (a, b) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
            ring.entry([t[a].min(t[b]), t[a].max(t[b])]).or_default().push(i);
        }
    }
    let volume = |i: usize| {
        let [a, b, c, d] = all[i].map(|v| points[v]);
        tet_signed_volume(&a, &b, &c, &d)
    };
    // Tets removed to surface a buried vertex stay out, so later fills
    // cannot undo the removal.
    let mut locked = vec![false; all.len()];
    for round in 0..=REPAIR_ROUNDS {
        let kept: Vec<[usize; 4]> = all.iter().zip(keep.iter()).filter(|(_, &k)| k).map(|(t, _)| *t).collect();
        let mesh = TetMesh {
            vertices: Vec::new(),
            tets: kept,
            boundary_map: Vec::new(),
            frame_id: 0,
        };
        let faces = mesh.boundary_faces();
        let mut on = vec![false; points.len()];
        for &v in faces.iter().flatten() {
            on[v] = true;
        }
        let exposed: Vec<usize> = (surface_count..points.len()).filter(|&v| on[v]).collect();
        let buried: Vec<usize> = (0..surface_count)
            .filter(|&v| !on[v] && star[v].iter().any(|&t| keep[t]))
            .collect();
        let orphans: Vec<usize> = (0..surface_count).filter(|&v| !star[v].iter().any(|&t| keep[t])).collect();
        let mut uses: HashMap<[usize; 2], usize> = HashMap::new();
        for f in &faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *uses.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
            }
        }
        let mut bad: Vec<[usize; 2]> = uses.into_iter().filter(|(_, n)| *n > 2).map(|(e, _)| e).collect();
        if bad.is_empty() && exposed.is_empty() && buried.is_empty() && orphans.is_empty() {
            return Ok(());
        }
        if round == REPAIR_ROUNDS {
            let mut trouble: Vec<usize> = bad.iter().flatten().copied().chain(exposed).chain(buried).chain(orphans).collect();
            trouble.sort_unstable();
            trouble.dedup();
            return Err(trouble);
        }
        let face_set: HashSet<[usize; 3]> = faces
            .iter()
            .map(|f| {
                let mut k = *f;
                k.sort_unstable();
                k
            })
            .collect();
        for v in buried {
            // A tet whose face opposite v is already on the boundary only
            // deepens the existing outside, so it cannot open a second gap.
            let opens_outside = |t: usize| {
                let mut f = [0; 3];
                let mut i = 0;
                for &w in &all[t] {
                    if w != v {
                        f[i] = w;
                        i += 1;
                    }
                }
                f.sort_unstable();
                face_set.contains(&f)
            };
            let depth = |t: usize| {
                let steiner = all[t].iter().any(|&w| w >= surface_count);
                let c = all[t].iter().map(|&w| points[w]).sum::<Vec3>() / 4.0;
                (!opens_outside(t), steiner, dist.distance(&c))
            };
            let shallowest = star[v]
                .iter()
                .copied()
                .filter(|&t| keep[t])
                .min_by(|&a, &b| depth(a).partial_cmp(&depth(b)).unwrap().then(a.cmp(&b)));
            if let Some(t) = shallowest {
                keep[t] = false;
                locked[t] = true;
            }
        }
        // An orphan takes the unlocked tet of its star nearest the surface.
        for v in orphans {
            let nearest = star[v].iter().copied().filter(|&t| !locked[t]).min_by(|&a, &b| {
                let d = |t: usize| dist.distance(&(all[t].iter().map(|&w| points[w]).sum::<Vec3>() / 4.0));
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            });
            if let Some(t) = nearest {
                keep[t] = true;
            }
        }
        // An exposed Steiner point whose star cannot be completed leaves
        // the mesh.
        for v in exposed {
            let fill = !star[v].iter().any(|&t| locked[t]);
            for &t in &star[v] {
                keep[t] = fill;
            }
        }
        bad.sort_unstable();
        for e in bad {
            let fan = ordered_fan(all, &ring[&e], e);
            let n = fan.len();
            // Split the excluded tets into runs; on a hull edge the open
            // ends touch the outside and are never filled.
            let closed = n > 1 && shares_face(&all[fan[0]], &all[fan[n - 1]], e);
            let Some(start) = (0..n).find(|&i| keep[fan[i]]) else { continue };
            let mut runs: Vec<(Vec<usize>, f64, bool)> = Vec::new();
            let mut cur: Vec<usize> = Vec::new();
            let mut touches_end = false;
            for k in 0..n {
                let i = if closed { (start + k) % n } else { k };
                let t = fan[i];
                if keep[t] {
                    if !cur.is_empty() {
                        let v = cur.iter().map(|&t| volume(t)).sum();
                        runs.push((std::mem::take(&mut cur), v, touches_end));
                    }
                    touches_end = false;
                } else {
                    if cur.is_empty() {
                        touches_end = !closed && i == 0;
                    }
                    cur.push(t);
                }
            }
            if !cur.is_empty() {
                let v = cur.iter().map(|&t| volume(t)).sum();
                runs.push((cur, v, touches_end || !closed));
            }
            // The outside of an open fan plays the role of the largest gap,
            // otherwise a locked gap does. With two or more locked gaps the
            // kept runs between them go instead.
            let is_locked = |run: &Vec<usize>| run.iter().any(|&t| locked[t]);
            let n_locked = runs.iter().filter(|r| !r.2 && is_locked(&r.0)).count();
            if n_locked > 1 {
                for k in 0..n {
                    let t = fan[k];
                    if keep[t] {
                        keep[t] = false;
                    }
                }
                continue;
            }
            let biggest = if !closed {
                None
            } else if n_locked == 1 {
                runs.iter().position(|r| is_locked(&r.0))
            } else {
                runs.iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .map(|(i, _)| i)
            };
            for (i, (run, _, open)) in runs.iter().enumerate() {
                if Some(i) != biggest && !open && !is_locked(run) {
                    for &t in run {
                        keep[t] = true;
                    }
                }
            }
        }
    }
    unreachable!("the last round returns")
}

fn shares_face(a: &[usize; 4], b: &[usize; 4], e: [usize; 2]) -> bool {
    a.iter().filter(|&&v| v != e[0] && v != e[1] && b.contains(&v)).count() == 1
}

/// Tets around edge `e` in rotational order.
fn ordered_fan(all: &[[usize; 4]], around: &[usize], e: [usize; 2]) -> Vec<usize> {
    let n = around.len();
    let mut used = vec![false; n];
    // Start from a tet with at most one neighbour in the fan (a hull end),
    // otherwise anywhere.
    let neighbours = |i: usize| (0..n).filter(|&j| j != i && shares_face(&all[around[i]], &all[around[j]], e)).count();
    let first = (0..n).find(|&i| neighbours(i) < 2).unwrap_or(0);
    let mut out = vec![around[first]];
    used[first] = true;
    let mut cur = first;
    while let Some(next) = (0..n).find(|&j| !used[j] && shares_face(&all[around[cur]], &all[around[j]], e)) {
        used[next] = true;
        out.push(around[next]);
        cur = next;
    }
    out
}

/// Delaunay tetrahedralization of the surface vertices plus interior
/// body-centred cubic Steiner points of spacing `(6 max_volume)^(1/3)`,
/// carved to the tets whose centroid lies inside the surface. Oversized
/// elements are split by centroid insertion. Where the carved boundary
/// cannot be repaired, nearby Steiner points are dropped and the
/// triangulation rebuilt.
pub fn tetrahedralize(surface: &SurfaceMesh, max_volume: f64) -> Result<TetMesh> {
    surface.validate()?;
    if !(max_volume > 0.0) || !max_volume.is_finite() {
        return Err(Error::InvalidArgument(format!("max_volume must be positive, got {max_volume}")));
    }
    let h = (6.0 * max_volume).cbrt();
    let inside = InsideTester::new(&surface.vertices, &surface.triangles);
    let dist = TriangleIndex::new(&surface.vertices, &surface.triangles);
    let bbox = surface.bbox();
    let ns = surface.vertices.len();

    let mut lattice: Vec<Vec3> = bcc_lattice(&bbox, h)
        .into_par_iter()
        .filter(|p| inside.contains(p) && dist.distance(p) >= STEINER_MARGIN * h)
        .collect();
    if ns + lattice.len() < 4 {
        return Err(Error::Tetrahedralize(format!("only {} points to triangulate", ns + lattice.len())));
    }

    let carve = |del: &Delaunay, del_to_point: &[usize], points: &[Vec3]| {
        let all: Vec<[usize; 4]> = del.finite_tets().iter().map(|t| t.map(|v| del_to_point[v])).collect();
        let mut keep: Vec<bool> = all
            .par_iter()
            .map(|t| inside.contains(&(t.iter().map(|&v| points[v]).sum::<Vec3>() / 4.0)))
            .collect();
        repair(&all, &mut keep, points, ns, &dist)?;
        Ok(all.into_iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t).collect::<Vec<_>>())
    };

    let mut attempt = 0;
    // Spots near which no Steiner point may go, with their radius.
    let mut excluded: Vec<(Vec3, f64)> = Vec::new();
    let (points, tets) = loop {
        let mut points: Vec<Vec3> = surface.vertices.clone();
        points.extend(&lattice);
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by_key(|&i| (morton(&points[i], &bbox), i));
        let mut del = Delaunay::new(&bbox);
        // Delaunay index (minus the 4 enclosing corners) to point index.
        let mut del_to_point = Vec::with_capacity(points.len());
        for &i in &order {
            del.insert(points[i])?;
            del_to_point.push(i);
        }
        let mut carved: std::result::Result<Vec<[usize; 4]>, Vec<usize>> = carve(&del, &del_to_point, &points);
        for _ in 0..REFINE_ROUNDS {
            let Ok(tets) = &carved else { break };
            let mut extra: Vec<Vec3> = tets
                .par_iter()
                .filter_map(|t| {
                    let p = t.map(|v| points[v]);
                    let v = tet_signed_volume(&p[0], &p[1], &p[2], &p[3]);
                    let c = p.iter().sum::<Vec3>() / 4.0;
                    let clear = excluded.iter().all(|(q, r)| (c - q).norm() > *r);
                    (v > max_volume && clear && dist.distance(&c) >= REFINE_MARGIN * h).then_some(c)
                })
                .collect();
            if extra.is_empty() {
                break;
            }
            extra.sort_by_key(|p| morton(p, &bbox));
            for p in extra {
                del.insert(p)?;
                del_to_point.push(points.len());
                points.push(p);
            }
            carved = carve(&del, &del_to_point, &points);
        }
        match carved {
            Ok(tets) => break (points, tets),
            Err(trouble) if attempt < RETRIES => {
                let spots: Vec<Vec3> = trouble.iter().map(|&v| points[v]).collect();
                attempt += 1;
                let reach = attempt as f64 * h;
                lattice.retain(|p| spots.iter().all(|q| (p - q).norm() > reach));
                excluded.extend(spots.into_iter().map(|q| (q, reach)));
            }
            Err(trouble) => {
                return Err(Error::Tetrahedralize(format!(
                    "boundary repair failed around {} vertices after {RETRIES} retries",
                    trouble.len()
                )))
            }
        }
    };
    if tets.is_empty() {
        return Err(Error::Tetrahedralize("no tetrahedron lies inside the surface".into()));
    }

    // Compact: surface vertices first in surface order, then used Steiner
    // points in insertion order.
    let mut used = vec![false; points.len()];
    for t in &tets {
        for &v in t {
            used[v] = true;
        }
    }
    if let Some(s) = (0..ns).find(|&s| !used[s]) {
        return Err(Error::Tetrahedralize(format!("surface vertex {s} is not part of any interior tet")));
    }
    let mut remap = vec![usize::MAX; points.len()];
    let mut vertices = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if used[i] {
            remap[i] = vertices.len();
            vertices.push(*p);
        }
    }
    let mut tets: Vec<[usize; 4]> = tets.iter().map(|t| t.map(|v| remap[v])).collect();
    tets.sort_unstable();
    let mesh = TetMesh {
        vertices,
        tets,
        boundary_map: (0..ns).collect(),
        frame_id: surface.frame_id,
    };
    mesh.validate().map_err(|e| Error::Tetrahedralize(format!("carved mesh is invalid: {e}")))?;
    Ok(mesh)
}
