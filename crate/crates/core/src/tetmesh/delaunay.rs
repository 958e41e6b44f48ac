//! Incremental Bowyer–Watson tetrahedralization on exact predicates.

use std::collections::{HashMap, HashSet};

use robust::Coord3D;

use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::volume::Vec3;

const NONE: usize = usize::MAX;

/// Faces opposite each local vertex, outward for a positive tet.
pub(crate) const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

fn coord(p: &Vec3) -> Coord3D<f64> {
    Coord3D { x: p.x, y: p.y, z: p.z }
}

/// Six times the signed volume sign: positive when `d` sees `a, b, c`
/// counter-clockwise (same convention as [`crate::geom::tet_signed_volume`]).
fn orient(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    -robust::orient3d(coord(a), coord(b), coord(c), coord(d))
}

/// Positive when `e` is strictly inside the circumsphere of the positive
/// tet `a, b, c, d`.
fn in_sphere(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3, e: &Vec3) -> f64 {
    robust::insphere(coord(b), coord(a), coord(c), coord(d), coord(e))
}

/// A tetrahedralization under construction. The first four points are the
/// corners of an enclosing tetrahedron.
pub(crate) struct Delaunay {
    pub points: Vec<Vec3>,
    pub tets: Vec<[usize; 4]>,
    adj: Vec<[usize; 4]>,
    alive: Vec<bool>,
    free: Vec<usize>,
    last: usize,
    walk_state: u64,
}

impl Delaunay {
    /// Empty triangulation whose enclosing tetrahedron contains `bbox`
    /// with a wide margin.
    pub fn new(bbox: &Aabb) -> Self {
        let c = (bbox.min + bbox.max) * 0.5;
        let r = (bbox.diagonal() * 0.5).max(1.0) * 1e3;
        let points = vec![
            c + Vec3::new(r, r, r),
            c + Vec3::new(r, -r, -r),
            c + Vec3::new(-r, r, -r),
            c + Vec3::new(-r, -r, r),
        ];
        let mut t = [0, 1, 2, 3];
        if orient(&points[0], &points[1], &points[2], &points[3]) < 0.0 {
            t.swap(2, 3);
        }
        Self {
            points,
            tets: vec![t],
            adj: vec![[NONE; 4]],
            alive: vec![true],
            free: Vec::new(),
            last: 0,
            walk_state: 0x9e37_79b9_7f4a_7c15,
        }
    }

    fn next_random(&mut self) -> u64 {
        // xorshift64; only used to break walk cycles.
        let mut x = self.walk_state;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.walk_state = x;
        x
    }

    fn face_orient(&self, t: usize, f: usize, p: &Vec3) -> f64 {
        let tet = self.tets[t];
        let [a, b, c] = TET_FACES[f].map(|i| self.points[tet[i]]);
        orient(&a, &b, &c, p)
    }

    /// Tet containing `p`, by a randomized visibility walk.
    fn locate(&mut self, p: &Vec3) -> usize {
        let mut t = if self.alive[self.last] {
            self.last
        } else {
            (0..self.tets.len()).find(|&i| self.alive[i]).unwrap()
        };
        'walk: loop {
            let start = (self.next_random() % 4) as usize;
            for k in 0..4 {
                let f = (start + k) % 4;
                // p on the outer side of face f.
                if self.face_orient(t, f, p) > 0.0 {
                    let n = self.adj[t][f];
                    if n != NONE {
                        t = n;
                        continue 'walk;
                    }
                }
            }
            return t;
        }
    }

    fn alloc(&mut self, tet: [usize; 4]) -> usize {
        if let Some(i) = self.free.pop() {
            self.tets[i] = tet;
            self.adj[i] = [NONE; 4];
            self.alive[i] = true;
            i
        } else {
            self.tets.push(tet);
            self.adj.push([NONE; 4]);
            self.alive.push(true);
            self.tets.len() - 1
        }
    }

    /// Inserts a point and returns its index.
    pub fn insert(&mut self, p: Vec3) -> Result<usize> {
        let t0 = self.locate(&p);
        if self.tets[t0].iter().any(|&v| self.points[v] == p) {
            return Err(Error::Tetrahedralize(format!("duplicate point {p:?}")));
        }
        let pi = self.points.len();
        self.points.push(p);

        let mut in_cavity = HashSet::from([t0]);
        let mut cavity = vec![t0];
        let mut stack = vec![t0];
        while let Some(t) = stack.pop() {
            for f in 0..4 {
                let n = self.adj[t][f];
                if n == NONE || in_cavity.contains(&n) {
                    continue;
                }
                let [a, b, c, d] = self.tets[n].map(|v| self.points[v]);
                if in_sphere(&a, &b, &c, &d, &p) > 0.0 {
                    in_cavity.insert(n);
                    cavity.push(n);
                    stack.push(n);
                }
            }
        }

        // Grow the cavity until every boundary face sees p strictly on its
        // inner side, so no new tet is flat or inverted.
        loop {
            let mut grown = false;
            for idx in 0..cavity.len() {
                let t = cavity[idx];
                for f in 0..4 {
                    let n = self.adj[t][f];
                    if n != NONE && in_cavity.contains(&n) {
                        continue;
                    }
                    let tet = self.tets[t];
                    let [a, b, c] = TET_FACES[f].map(|i| self.points[tet[i]]);
                    if orient(&a, &b, &c, &p) >= 0.0 {
                        if n == NONE {
                            return Err(Error::Tetrahedralize("point outside the enclosing tetrahedron".into()));
                        }
                        in_cavity.insert(n);
                        cavity.push(n);
                        grown = true;
                    }
                }
            }
            if !grown {
                break;
            }
        }

        // Boundary faces become new tets with p.
        let mut edge_owner: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        let mut created = Vec::new();
        for &t in &cavity {
            for f in 0..4 {
                let n = self.adj[t][f];
                if n != NONE && in_cavity.contains(&n) {
                    continue;
                }
                let tet = self.tets[t];
                let face = TET_FACES[f].map(|i| tet[i]);
                created.push((face, n, t));
            }
        }
        for &t in &cavity {
            self.alive[t] = false;
        }
        let mut new_ids = Vec::with_capacity(created.len());
        for &(face, n, old) in &created {
            // Local vertex 0 is p; the face opposite it keeps the outward
            // order of the cavity boundary.
            let nt = self.alloc([pi, face[0], face[1], face[2]]);
            self.adj[nt][0] = n;
            if n != NONE {
                let slot = self.adj[n].iter().position(|&x| x == old).unwrap();
                self.adj[n][slot] = nt;
            }
            new_ids.push(nt);
        }
        for &nt in &new_ids {
            let tet = self.tets[nt];
            for f in 1..4 {
                // A face through p is identified by its two other vertices.
                let mut rest = (1..4).filter(|&i| i != f).map(|i| tet[i]);
                let (u, v) = (rest.next().unwrap(), rest.next().unwrap());
                let key = (u.min(v), u.max(v));
                if let Some((other, of)) = edge_owner.remove(&key) {
                    self.adj[nt][f] = other;
                    self.adj[other][of] = nt;
                } else {
                    edge_owner.insert(key, (nt, f));
                }
            }
        }
        if !edge_owner.is_empty() {
            return Err(Error::Tetrahedralize("cavity boundary is not a closed surface".into()));
        }
        self.free.extend(cavity);
        self.last = new_ids[0];
        Ok(pi)
    }

    /// Live tets not touching the enclosing corners, re-indexed so that
    /// input point `i` becomes `i` (the corners are dropped).
    pub fn finite_tets(&self) -> Vec<[usize; 4]> {
        self.tets
            .iter()
            .zip(&self.alive)
            .filter(|(t, &a)| a && t.iter().all(|&v| v >= 4))
            .map(|(t, _)| t.map(|v| v - 4))
            .collect()
    }
}
