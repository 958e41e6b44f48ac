//! Dense-field registration: direct minimization of
//! `MSE(fixed, moving ∘ (id + u)) + λ · mean((Δu)²)`.
//!
//! `Δ` is the 7-point Laplacian in physical units with replicate (Neumann)
//! boundaries, applied per displacement component.

use rayon::prelude::*;

use super::pyramid::{self, Level};
use super::{IterationLog, RegistrationConfig, RegistrationOutcome};
use crate::error::{Error, Result};
use crate::register::DisplacementField;
use crate::volume::{Grid, ImageVolume, Vec3};

/// Chunk size for reductions; fixed so sums are bit-reproducible regardless
/// of thread scheduling.
const REDUCE_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub similarity: f64,
    pub smooth: f64,
}

#[inline]
fn neighbor(c: usize, n: usize, up: bool) -> usize {
    if up {
        if c + 1 < n {
            c + 1
        } else {
            c
        }
    } else if c > 0 {
        c - 1
    } else {
        c
    }
}

/// Discrete vector Laplacian with replicate boundaries.
pub fn laplacian(grid: &Grid, u: &[Vec3]) -> Vec<Vec3> {
    let [nx, ny, nz] = grid.dims;
    let inv = grid.spacing.map(|h| 1.0 / (h * h));
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let c = u[idx];
            let ax = u[grid.index(neighbor(i, nx, true), j, k)] + u[grid.index(neighbor(i, nx, false), j, k)] - 2.0 * c;
            let ay = u[grid.index(i, neighbor(j, ny, true), k)] + u[grid.index(i, neighbor(j, ny, false), k)] - 2.0 * c;
            let az = u[grid.index(i, j, neighbor(k, nz, true))] + u[grid.index(i, j, neighbor(k, nz, false))] - 2.0 * c;
            ax * inv[0] + ay * inv[1] + az * inv[2]
        })
        .collect()
}

/// Adjoint of [`laplacian`] (differs from it only at the boundary).
pub fn laplacian_transpose(grid: &Grid, r: &[Vec3]) -> Vec<Vec3> {
    let dims = grid.dims;
    let inv = grid.spacing.map(|h| 1.0 / (h * h));
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let c = grid.coords(idx);
            let mut acc = Vec3::zeros();
            for a in 0..3 {
                let n = dims[a];
                let y = c[a];
                let at = |q: usize| {
                    let mut cc = c;
                    cc[a] = q;
                    r[grid.index(cc[0], cc[1], cc[2])]
                };
                let mut s = -2.0 * r[idx];
                // Sources x with x + 1 clamped to y.
                if y >= 1 {
                    s += at(y - 1);
                }
                if y == n - 1 {
                    s += r[idx];
                }
                // Sources x with x - 1 clamped to y.
                if y + 1 < n {
                    s += at(y + 1);
                }
                if y == 0 {
                    s += r[idx];
                }
                acc += s * inv[a];
            }
            acc
        })
        .collect()
}

fn chunked_sum<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

fn check_grids(fixed: &ImageVolume, moving: &ImageVolume, u: &DisplacementField) -> Result<()> {
    fixed.grid.ensure_same(&moving.grid, "fixed vs moving image")?;
    fixed.grid.ensure_same(&u.grid, "fixed image vs displacement field")
}

/// Loss terms of a field, on the images exactly as given.
pub fn loss_dense(fixed: &ImageVolume, moving: &ImageVolume, u: &DisplacementField, lambda: f64) -> Result<LossTerms> {
    check_grids(fixed, moving, u)?;
    let grid = fixed.grid;
    let n = grid.len();
    let sim_sum = chunked_sum(n, |idx| {
        let x = grid.point_of(idx);
        let r = moving.sample_trilinear(&(x + u.u[idx])) - fixed.data[idx] as f64;
        r * r
    });
    let lap = laplacian(&grid, &u.u);
    let smooth_sum = chunked_sum(n, |idx| lap[idx].norm_squared());
    let similarity = sim_sum / n as f64;
    let smooth = smooth_sum / (3 * n) as f64;
    Ok(LossTerms {
        total: similarity + lambda * smooth,
        similarity,
        smooth,
    })
}

/// Loss terms and the analytic gradient with respect to every field vector.
pub fn loss_dense_gradient(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    u: &DisplacementField,
    lambda: f64,
) -> Result<(LossTerms, Vec<Vec3>)> {
    check_grids(fixed, moving, u)?;
    let grid = fixed.grid;
    let n = grid.len();
    let per_voxel: Vec<(f64, Vec3)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let x = grid.point_of(idx);
            let (m, gm) = moving.sample_with_gradient(&(x + u.u[idx]));
            let r = m - fixed.data[idx] as f64;
            (r * r, gm * (2.0 * r / n as f64))
        })
        .collect();
    let sim_sum = chunked_sum(n, |idx| per_voxel[idx].0);
    let lap = laplacian(&grid, &u.u);
    let smooth_sum = chunked_sum(n, |idx| lap[idx].norm_squared());
    let lt = laplacian_transpose(&grid, &lap);
    let w = lambda * 2.0 / (3 * n) as f64;
    let grad = per_voxel
        .par_iter()
        .zip(lt.par_iter())
        .map(|((_, g), l)| g + l * w)
        .collect();
    let similarity = sim_sum / n as f64;
    let smooth = smooth_sum / (3 * n) as f64;
    Ok((
        LossTerms {
            total: similarity + lambda * smooth,
            similarity,
            smooth,
        },
        grad,
    ))
}

/// Separable Gaussian smoothing `K` on a grid, truncated at 3σ and
/// renormalized near the boundary, with its exact adjoint.
pub(crate) struct GaussianOp {
    kernel: Vec<f64>,
    radius: i64,
}

impl GaussianOp {
    pub(crate) fn new(sigma_vox: f64) -> Option<Self> {
        if !(sigma_vox > 0.0) {
            return None;
        }
        let radius = (3.0 * sigma_vox).ceil() as i64;
        let kernel = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
            .collect();
        Some(Self { kernel, radius })
    }

    fn norm(&self, c: i64, n: i64) -> f64 {
        (-self.radius..=self.radius)
            .filter(|o| (0..n).contains(&(c + o)))
            .map(|o| self.kernel[(o + self.radius) as usize])
            .sum()
    }

    fn pass(&self, grid: &Grid, v: &[Vec3], a: usize, transpose: bool) -> Vec<Vec3> {
        let n = grid.dims[a] as i64;
        let norms: Vec<f64> = (0..n).map(|c| self.norm(c, n)).collect();
        (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let c = grid.coords(idx);
                let ca = c[a] as i64;
                let mut acc = Vec3::zeros();
                for o in -self.radius..=self.radius {
                    let q = ca + o;
                    if !(0..n).contains(&q) {
                        continue;
                    }
                    let mut cc = c;
                    cc[a] = q as usize;
                    let w = self.kernel[(o + self.radius) as usize];
                    let z = if transpose { norms[q as usize] } else { norms[ca as usize] };
                    acc += v[grid.index(cc[0], cc[1], cc[2])] * (w / z);
                }
                acc
            })
            .collect()
    }

    pub(crate) fn apply(&self, grid: &Grid, v: &[Vec3]) -> Vec<Vec3> {
        let x = self.pass(grid, v, 0, false);
        let y = self.pass(grid, &x, 1, false);
        self.pass(grid, &y, 2, false)
    }

    pub(crate) fn apply_transpose(&self, grid: &Grid, v: &[Vec3]) -> Vec<Vec3> {
        let x = self.pass(grid, v, 0, true);
        let y = self.pass(grid, &x, 1, true);
        self.pass(grid, &y, 2, true)
    }
}

/// Adam moment state for a vector field.
struct Adam {
    m: Vec<Vec3>,
    v: Vec<Vec3>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            t: 0,
        }
    }

    /// One step on `x` given gradient `g` (already scaled to O(1) magnitudes).
    fn step(&mut self, x: &mut [Vec3], g: &[Vec3], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        x.par_iter_mut()
            .zip(self.m.par_iter_mut())
            .zip(self.v.par_iter_mut())
            .zip(g.par_iter())
            .for_each(|(((xi, mi), vi), gi)| {
                *mi = *mi * Self::BETA1 + gi * (1.0 - Self::BETA1);
                *vi = *vi * Self::BETA2 + gi.component_mul(gi) * (1.0 - Self::BETA2);
                for c in 0..3 {
                    let mh = mi[c] / c1;
                    let vh = vi[c] / c2;
                    xi[c] -= lr * mh / (vh.sqrt() + Self::EPS);
                }
            });
    }
}

/// Coarse-to-fine dense registration.
///
/// Images are normalized with the fixed image's intensity range before
/// optimization. Each pyramid level starts from the upsampled previous result
/// and runs Adam on a Gaussian-smoothed increment; a level's result is kept
/// only if it lowers the full-resolution loss, so per-level final losses are
/// non-increasing.
pub fn register_dense(fixed: &ImageVolume, moving: &ImageVolume, config: &RegistrationConfig) -> Result<RegistrationOutcome> {
    config.validate()?;
    fixed.grid.ensure_same(&moving.grid, "fixed vs moving image")?;
    let (fixed_n, moving_n) = pyramid::normalize_pair(fixed, moving);
    let levels = pyramid::build(&fixed_n, &moving_n, config.pyramid_levels);
    let iterations = config.dense_iterations();
    let lambda = config.lambda;

    let full_grid = fixed.grid;
    let mut best_full = DisplacementField::zeros(full_grid);
    let mut best_full_loss = loss_dense(&fixed_n, &moving_n, &best_full, lambda)?.total;
    let mut log = Vec::new();
    let mut level_losses = Vec::new();

    for (li, Level { fixed: f, moving: m, level }) in levels.iter().enumerate().rev() {
        let grid = f.grid;
        let base = if li + 1 == levels.len() {
            vec![Vec3::zeros(); grid.len()]
        } else {
            pyramid::resample_field(&best_full, &grid).u
        };
        // The level optimizes `u = base + K v` over `v`.
        let kop = GaussianOp::new(config.smoothing_sigma_vox);
        let compose = |v: &[Vec3]| -> DisplacementField {
            let kv = match &kop {
                Some(k) => k.apply(&grid, v),
                None => v.to_vec(),
            };
            DisplacementField {
                grid,
                u: base.iter().zip(kv).map(|(b, d)| b + d).collect(),
            }
        };
        let mut v = vec![Vec3::zeros(); grid.len()];
        let scale = grid.len() as f64;
        let base_lr = config.learning_rate * grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut adam = Adam::new(grid.len());
        let mut best = (f64::INFINITY, base.clone());
        for it in 0..iterations {
            let u = compose(&v);
            let (terms, grad_u) = loss_dense_gradient(f, m, &u, lambda)?;
            if !terms.total.is_finite() {
                return Err(Error::Divergence {
                    level: *level,
                    iteration: it,
                    loss: terms.total,
                });
            }
            log.push(IterationLog {
                level: *level,
                iteration: it,
                total: terms.total,
                similarity: terms.similarity,
                smooth: terms.smooth,
            });
            if terms.total < best.0 {
                best = (terms.total, u.u);
            }
            let mut grad = match &kop {
                Some(k) => k.apply_transpose(&grid, &grad_u),
                None => grad_u,
            };
            grad.par_iter_mut().for_each(|g| *g *= scale);
            let decay = 1.0 - 0.9 * it as f64 / iterations as f64;
            adam.step(&mut v, &grad, base_lr * decay);
        }
        let u = compose(&v);
        let final_terms = loss_dense(f, m, &u, lambda)?;
        if final_terms.total < best.0 {
            best = (final_terms.total, u.u);
        }
        let level_field = DisplacementField { grid, u: best.1 };
        let candidate = if grid.same_as(&full_grid) {
            level_field
        } else {
            pyramid::resample_field(&level_field, &full_grid)
        };
        let cand_loss = loss_dense(&fixed_n, &moving_n, &candidate, lambda)?.total;
        if !cand_loss.is_finite() {
            return Err(Error::Divergence {
                level: *level,
                iteration: iterations,
                loss: cand_loss,
            });
        }
        if cand_loss <= best_full_loss {
            best_full = candidate;
            best_full_loss = cand_loss;
        }
        level_losses.push(best_full_loss);
    }

    Ok(RegistrationOutcome {
        field: best_full,
        log,
        level_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ElementKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(grid: Grid, rng: &mut ChaCha8Rng) -> ImageVolume {
        ImageVolume::new(grid, ElementKind::F32, (0..grid.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    /// Independent evaluation with explicit loops and a hand-written
    /// trilinear interpolation.
    fn brute_force_loss(f: &ImageVolume, m: &ImageVolume, u: &DisplacementField, lambda: f64) -> f64 {
        let g = f.grid;
        let [nx, ny, nz] = g.dims;
        let val = |i: i64, j: i64, k: i64| -> f64 {
            let c = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
            m.data[c(i, nx) + nx * (c(j, ny) + ny * c(k, nz))] as f64
        };
        let mut sim = 0.0;
        let mut smooth = 0.0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + nx * (j + ny * k);
                    let p = [i as f64, j as f64, k as f64];
                    let mut q = [0.0; 3];
                    for a in 0..3 {
                        let pos = g.origin[a] + p[a] * g.spacing[a] + u.u[idx][a];
                        q[a] = ((pos - g.origin[a]) / g.spacing[a]).clamp(0.0, (g.dims[a] - 1) as f64);
                    }
                    let (i0, j0, k0) = (q[0].floor() as i64, q[1].floor() as i64, q[2].floor() as i64);
                    let (fx, fy, fz) = (q[0] - i0 as f64, q[1] - j0 as f64, q[2] - k0 as f64);
                    let mut s = 0.0;
                    for (dk, wz) in [(0, 1.0 - fz), (1, fz)] {
                        for (dj, wy) in [(0, 1.0 - fy), (1, fy)] {
                            for (di, wx) in [(0, 1.0 - fx), (1, fx)] {
                                s += wx * wy * wz * val(i0 + di, j0 + dj, k0 + dk);
                            }
                        }
                    }
                    sim += (s - f.data[idx] as f64).powi(2);
                    for c in 0..3 {
                        let at = |ii: usize, jj: usize, kk: usize| u.u[ii + nx * (jj + ny * kk)][c];
                        let lap = (at((i + 1).min(nx - 1), j, k) + at(i.saturating_sub(1), j, k) - 2.0 * at(i, j, k))
                            / g.spacing[0].powi(2)
                            + (at(i, (j + 1).min(ny - 1), k) + at(i, j.saturating_sub(1), k) - 2.0 * at(i, j, k))
                                / g.spacing[1].powi(2)
                            + (at(i, j, (k + 1).min(nz - 1)) + at(i, j, k.saturating_sub(1)) - 2.0 * at(i, j, k))
                                / g.spacing[2].powi(2);
                        smooth += lap * lap;
                    }
                }
            }
        }
        let n = (nx * ny * nz) as f64;
        sim / n + lambda * smooth / (3.0 * n)
    }

    #[test]
    fn zero_loss_for_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Grid::new([5, 4, 3], [1.0; 3], [0.0; 3]).unwrap();
        let img = random_image(g, &mut rng);
        let t = loss_dense(&img, &img, &DisplacementField::zeros(g), 1e-3).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn laplacian_annihilates_linear_fields_in_interior() {
        let g = Grid::new([6, 6, 6], [1.0, 0.5, 2.0], [1.0, 2.0, 3.0]).unwrap();
        let f = DisplacementField::from_fn(g, |p| Vec3::new(0.3 + 0.2 * p.x - p.y, 0.1 * p.z, -0.5 * p.x + p.y));
        let lap = laplacian(&g, &f.u);
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            if (1..5).contains(&i) && (1..5).contains(&j) && (1..5).contains(&k) {
                assert!(lap[idx].norm() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::new([4, 4, 4], [1.0, 1.2, 0.8], [0.0, 1.0, -1.0]).unwrap();
        let f = random_image(g, &mut rng);
        let m = random_image(g, &mut rng);
        let u = DisplacementField::new(
            g,
            (0..g.len())
                .map(|_| Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                .collect(),
        )
        .unwrap();
        let fast = loss_dense(&f, &m, &u, 0.37).unwrap().total;
        let slow = brute_force_loss(&f, &m, &u, 0.37);
        assert!((fast - slow).abs() <= 1e-12 * slow.abs().max(1.0), "{fast} vs {slow}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::new([6, 6, 6], [1.0, 0.9, 1.3], [0.0; 3]).unwrap();
        let f = random_image(g, &mut rng);
        let m = random_image(g, &mut rng);
        // Keep sample points away from voxel faces where trilinear
        // interpolation is not differentiable.
        let u = DisplacementField::new(
            g,
            (0..g.len())
                .map(|_| {
                    Vec3::from_fn(|a, _| {
                        let cells = rng.random_range(-1i32..=1) as f64;
                        let frac = rng.random_range(0.2..0.8);
                        (cells + frac) * g.spacing[a]
                    })
                })
                .collect(),
        )
        .unwrap();
        let lambda = 0.5;
        let (_, grad) = loss_dense_gradient(&f, &m, &u, lambda).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let idx = rng.random_range(0..g.len());
            let c = rng.random_range(0..3);
            let x = g.point_of(idx) + u.u[idx];
            let ci = g.continuous_index(&x);
            if (0..3).any(|a| ci[a] <= 0.0 || ci[a] >= (g.dims[a] - 1) as f64) {
                continue;
            }
            let mut up = u.clone();
            up.u[idx][c] += h;
            let mut dn = u.clone();
            dn.u[idx][c] -= h;
            let fd = (loss_dense(&f, &m, &up, lambda).unwrap().total - loss_dense(&f, &m, &dn, lambda).unwrap().total)
                / (2.0 * h);
            let an = grad[idx][c];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "{idx}/{c}: {fd} vs {an}");
            checked += 1;
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Grid::new([5, 3, 4], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let rv = |rng: &mut ChaCha8Rng| -> Vec<Vec3> {
            (0..g.len()).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
        };
        let a = rv(&mut rng);
        let b = rv(&mut rng);
        let la = laplacian(&g, &a);
        let ltb = laplacian_transpose(&g, &b);
        let lhs: f64 = la.iter().zip(&b).map(|(x, y)| x.dot(y)).sum();
        let rhs: f64 = a.iter().zip(&ltb).map(|(x, y)| x.dot(y)).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
