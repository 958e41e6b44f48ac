//! Cubic B-spline free-form deformation and its stochastic optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pyramid::{self, Level};
use super::{IterationLog, RegistrationConfig};
use crate::error::{Error, Result};
use crate::register::DisplacementField;
use crate::volume::{Grid, ImageVolume, Vec3};

/// Number of initial batches averaged to estimate the gradient scale.
const GAIN_PROBES: usize = 5;

/// Centered cubic B-spline and its first two derivatives.
fn bspline(s: f64) -> [f64; 3] {
    let a = s.abs();
    let sg = s.signum();
    if a < 1.0 {
        [2.0 / 3.0 - a * a + 0.5 * a * a * a, sg * (-2.0 * a + 1.5 * a * a), -2.0 + 3.0 * a]
    } else if a < 2.0 {
        let b = 2.0 - a;
        [b * b * b / 6.0, -sg * 0.5 * b * b, b]
    } else {
        [0.0; 3]
    }
}

/// The four nonzero basis weights at fractional offset `f` in [0, 1).
#[inline]
fn weights(f: f64) -> [f64; 4] {
    let g = 1.0 - f;
    [
        g * g * g / 6.0,
        (3.0 * f * f * f - 6.0 * f * f + 4.0) / 6.0,
        (-3.0 * f * f * f + 3.0 * f * f + 3.0 * f + 1.0) / 6.0,
        f * f * f / 6.0,
    ]
}

/// Control-point displacements on a lattice that extends one knot interval
/// beyond the image domain on each side (plus the cubic support).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfdTransform {
    /// Fixed image grid the transform is defined over.
    pub domain: Grid,
    pub lattice_dims: [usize; 3],
    pub lattice_spacing: [f64; 3],
    pub lattice_origin: [f64; 3],
    pub coeffs: Vec<Vec3>,
}

impl FfdTransform {
    /// Zero transform with knots every `control_spacing_vox` voxels.
    pub fn new(domain: Grid, control_spacing_vox: f64) -> Result<Self> {
        if !(control_spacing_vox > 0.0) {
            return Err(Error::InvalidArgument("control spacing must be positive".into()));
        }
        let ext = domain.extent();
        let lattice_spacing = [0, 1, 2].map(|a| domain.spacing[a] * control_spacing_vox);
        let lattice_dims = [0, 1, 2].map(|a| (ext[a] / lattice_spacing[a]).floor() as usize + 4);
        let lattice_origin = [0, 1, 2].map(|a| domain.origin[a] - lattice_spacing[a]);
        let n = lattice_dims.iter().product();
        Ok(Self {
            domain,
            lattice_dims,
            lattice_spacing,
            lattice_origin,
            coeffs: vec![Vec3::zeros(); n],
        })
    }

    #[inline]
    pub fn lattice_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.lattice_dims[0] * (j + self.lattice_dims[1] * k)
    }

    /// Physical position of a control point.
    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = [i, j, k];
        Vec3::from_fn(|a, _| self.lattice_origin[a] + c[a] as f64 * self.lattice_spacing[a])
    }

    /// First lattice index and per-axis weights of the 4×4×4 support at `p`.
    #[inline]
    fn support(&self, p: &Vec3) -> ([usize; 3], [[f64; 4]; 3]) {
        let mut first = [0; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let t = ((p[a] - self.lattice_origin[a]) / self.lattice_spacing[a])
                .clamp(1.0, (self.lattice_dims[a] - 3) as f64);
            let i = (t.floor() as usize).min(self.lattice_dims[a] - 3);
            first[a] = i - 1;
            w[a] = weights(t - i as f64);
        }
        (first, w)
    }

    /// Displacement at a physical point.
    pub fn evaluate(&self, p: &Vec3) -> Vec3 {
        let (f, w) = self.support(p);
        let mut acc = Vec3::zeros();
        for (c, wz) in w[2].iter().enumerate() {
            for (b, wy) in w[1].iter().enumerate() {
                let wyz = wy * wz;
                for (a, wx) in w[0].iter().enumerate() {
                    acc += self.coeffs[self.lattice_index(f[0] + a, f[1] + b, f[2] + c)] * (wx * wyz);
                }
            }
        }
        acc
    }

    /// The B-spline evaluated at every fixed-grid voxel center.
    pub fn to_dense(&self) -> DisplacementField {
        DisplacementField::from_fn(self.domain, |p| self.evaluate(p))
    }

    /// Separable terms of the bending energy: per-axis derivative orders and
    /// weights, normalized by the domain volume.
    fn energy_terms(&self) -> Vec<([usize; 3], f64)> {
        let d = self.lattice_spacing;
        let ext = self.domain.extent();
        // Degenerate axes contribute no volume; integrate over a unit span.
        let span: Vec<f64> = (0..3).map(|a| if ext[a] > 0.0 { ext[a] } else { d[a] }).collect();
        let jac = d[0] * d[1] * d[2] / (span[0] * span[1] * span[2]);
        vec![
            ([2, 0, 0], jac / d[0].powi(4)),
            ([0, 2, 0], jac / d[1].powi(4)),
            ([0, 0, 2], jac / d[2].powi(4)),
            ([1, 1, 0], 2.0 * jac / (d[0] * d[1]).powi(2)),
            ([1, 0, 1], 2.0 * jac / (d[0] * d[2]).powi(2)),
            ([0, 1, 1], 2.0 * jac / (d[1] * d[2]).powi(2)),
        ]
    }

    fn grams(&self) -> [[Gram; 3]; 3] {
        let ext = self.domain.extent();
        [0, 1, 2].map(|a| {
            let hi = 1.0 + ext[a] / self.lattice_spacing[a];
            let hi = if hi > 1.0 { hi } else { 2.0 };
            [0, 1, 2].map(|order| Gram::new(self.lattice_dims[a], 1.0, hi, order))
        })
    }

    /// Applies `Σ_terms weight · (G_z ⊗ G_y ⊗ G_x)` to the coefficients.
    fn energy_operator(&self, c: &[Vec3]) -> Vec<Vec3> {
        let grams = self.grams();
        let mut out = vec![Vec3::zeros(); c.len()];
        for (orders, weight) in self.energy_terms() {
            let applied = kron_apply(
                self.lattice_dims,
                [&grams[0][orders[0]], &grams[1][orders[1]], &grams[2][orders[2]]],
                c,
            );
            for (o, v) in out.iter_mut().zip(applied) {
                *o += v * weight;
            }
        }
        out
    }

    /// Mean over the domain of the summed squared second derivatives of the
    /// displacement (mixed terms counted twice).
    pub fn bending_energy(&self) -> f64 {
        let k = self.energy_operator(&self.coeffs);
        self.coeffs.iter().zip(&k).map(|(c, kc)| c.dot(kc)).sum()
    }

    /// Gradient of [`Self::bending_energy`] with respect to the coefficients.
    pub fn bending_gradient(&self) -> Vec<Vec3> {
        self.energy_operator(&self.coeffs).into_iter().map(|v| v * 2.0).collect()
    }
}

/// Dense 1D Gram matrix of basis derivatives over `[lo, hi]` in knot units.
struct Gram {
    n: usize,
    m: Vec<f64>,
}

impl Gram {
    fn new(n: usize, lo: f64, hi: f64, order: usize) -> Self {
        const X: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        const W: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        let mut m = vec![0.0; n * n];
        let mut breaks = vec![lo];
        let mut b = lo.floor() + 1.0;
        while b < hi {
            breaks.push(b);
            b += 1.0;
        }
        breaks.push(hi);
        for seg in breaks.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in X.iter().zip(W) {
                let t = mid + half * x;
                let vals: Vec<(usize, f64)> = (0..n)
                    .filter_map(|l| {
                        let v = bspline(t - l as f64)[order];
                        (v != 0.0).then_some((l, v))
                    })
                    .collect();
                for &(l, vl) in &vals {
                    for &(r, vr) in &vals {
                        m[l * n + r] += w * half * vl * vr;
                    }
                }
            }
        }
        Self { n, m }
    }
}

fn kron_apply(dims: [usize; 3], g: [&Gram; 3], c: &[Vec3]) -> Vec<Vec3> {
    let [nx, ny, nz] = dims;
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut a = vec![Vec3::zeros(); c.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut s = Vec3::zeros();
                for ii in 0..nx {
                    s += c[idx(ii, j, k)] * g[0].m[i * g[0].n + ii];
                }
                a[idx(i, j, k)] = s;
            }
        }
    }
    let mut b = vec![Vec3::zeros(); c.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut s = Vec3::zeros();
                for jj in 0..ny {
                    s += a[idx(i, jj, k)] * g[1].m[j * g[1].n + jj];
                }
                b[idx(i, j, k)] = s;
            }
        }
    }
    let mut out = vec![Vec3::zeros(); c.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let mut s = Vec3::zeros();
                for kk in 0..nz {
                    s += b[idx(i, j, kk)] * g[2].m[k * g[2].n + kk];
                }
                out[idx(i, j, k)] = s;
            }
        }
    }
    out
}

/// Result of an FFD registration.
#[derive(Clone, Debug)]
pub struct FfdOutcome {
    pub transform: FfdTransform,
    pub log: Vec<IterationLog>,
}

/// Stochastic MSE + bending-energy gradient from one batch of samples.
fn batch_gradient(
    ffd: &FfdTransform,
    level: &Level,
    samples: &[Vec3],
    lambda: f64,
) -> (f64, f64, Vec<Vec3>) {
    let s = samples.len() as f64;
    let per_sample: Vec<(f64, Vec3, [usize; 3], [[f64; 4]; 3])> = samples
        .par_iter()
        .map(|x| {
            let (first, w) = ffd.support(x);
            let u = ffd.evaluate(x);
            let (m, gm) = level.moving.sample_with_gradient(&(x + u));
            let r = m - level.fixed.sample_trilinear(x);
            (r * r, gm * (2.0 * r / s), first, w)
        })
        .collect();
    let mut grad = vec![Vec3::zeros(); ffd.coeffs.len()];
    let mut sim = 0.0;
    for (r2, contrib, f, w) in &per_sample {
        sim += r2;
        for (c, wz) in w[2].iter().enumerate() {
            for (b, wy) in w[1].iter().enumerate() {
                for (a, wx) in w[0].iter().enumerate() {
                    grad[ffd.lattice_index(f[0] + a, f[1] + b, f[2] + c)] += contrib * (wx * wy * wz);
                }
            }
        }
    }
    let bend = if lambda > 0.0 {
        let k = ffd.energy_operator(&ffd.coeffs);
        let e: f64 = ffd.coeffs.iter().zip(&k).map(|(c, kc)| c.dot(kc)).sum();
        for (g, kc) in grad.iter_mut().zip(&k) {
            *g += kc * (2.0 * lambda);
        }
        e
    } else {
        0.0
    };
    (sim / s, bend, grad)
}

fn draw_samples(rng: &mut ChaCha8Rng, grid: &Grid, n: usize) -> Vec<Vec3> {
    let ext = grid.extent();
    (0..n)
        .map(|_| Vec3::from_fn(|a, _| grid.origin[a] + rng.random::<f64>() * ext[a]))
        .collect()
}

/// Coarse-to-fine stochastic gradient descent with gain `a/(t+A)^α`.
///
/// The raw gradient is divided by the mean max-norm of the gradient over a
/// few initial batches at each level, so `a` is a displacement in mm.
pub fn register_ffd(fixed: &ImageVolume, moving: &ImageVolume, config: &RegistrationConfig) -> Result<FfdOutcome> {
    config.validate()?;
    fixed.grid.ensure_same(&moving.grid, "fixed vs moving image")?;
    let (fixed_n, moving_n) = pyramid::normalize_pair(fixed, moving);
    let levels = pyramid::build(&fixed_n, &moving_n, config.pyramid_levels);
    let mut ffd = FfdTransform::new(fixed.grid, config.control_spacing_vox)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let iterations = config.ffd_iterations();
    let mut log = Vec::new();

    for level in levels.iter().rev() {
        let mut g0 = 0.0;
        for _ in 0..GAIN_PROBES {
            let samples = draw_samples(&mut rng, &level.fixed.grid, config.ffd_samples);
            let (_, _, g) = batch_gradient(&ffd, level, &samples, config.lambda);
            g0 += g.iter().map(|v| v.amax()).fold(0.0, f64::max);
        }
        g0 /= GAIN_PROBES as f64;
        if !(g0 > 0.0) {
            // No image signal to follow at this level.
            continue;
        }
        for it in 0..iterations {
            let samples = draw_samples(&mut rng, &level.fixed.grid, config.ffd_samples);
            let (sim, bend, grad) = batch_gradient(&ffd, level, &samples, config.lambda);
            let total = sim + config.lambda * bend;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    level: level.level,
                    iteration: it,
                    loss: total,
                });
            }
            log.push(IterationLog {
                level: level.level,
                iteration: it,
                total,
                similarity: sim,
                smooth: bend,
            });
            let gain = config.gain_a / (it as f64 + config.gain_big_a).powf(config.gain_alpha) / g0;
            for (c, g) in ffd.coeffs.iter_mut().zip(&grad) {
                *c -= g * gain;
            }
        }
    }
    if ffd.coeffs.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
        return Err(Error::Divergence {
            level: 0,
            iteration: iterations,
            loss: f64::NAN,
        });
    }
    Ok(FfdOutcome { transform: ffd, log })
}
