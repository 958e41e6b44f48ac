//! Synthetic beating left-ventricle phantom with analytic ground truth.
//!
//! The myocardium at end-diastole is a truncated ellipsoidal shell: the region
//! between an endocardial and an epicardial ellipsoid, below a basal plane.
//! Frame `t` is the image of that geometry under the anisotropic scaling
//! `x -> c + S(t)(x - c)` with `S(t) = diag(s, s, 1 - ℓ g(t))`,
//! `s = 1 - c_r g(t)` and `g(t) = sin²(π t / (N_T - 1))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::register::DisplacementField;
use crate::volume::{label, ElementKind, FrameSequence, Grid, ImageVolume, LabelVolume, Vec3};

pub const MYOCARDIUM_INTENSITY: f64 = 180.0;
pub const BLOOD_POOL_INTENSITY: f64 = 90.0;
pub const BACKGROUND_INTENSITY: f64 = 30.0;

/// Subsamples per axis used to compute partial-volume intensities.
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm per voxel.
    pub spacing: [f64; 3],
    /// Endocardial semi-axes (mm).
    pub endo_semi_axes: [f64; 3],
    /// Epicardial semi-axes (mm); each strictly larger than the endocardial one.
    pub epi_semi_axes: [f64; 3],
    /// Height of the basal plane above the ellipsoid center (mm). Tissue above
    /// it is cut away.
    pub base_cut_mm: f64,
    pub n_frames: usize,
    /// Peak in-plane radial contraction fraction.
    pub contraction: f64,
    /// Peak longitudinal shortening fraction.
    pub shortening: f64,
    /// Gaussian noise standard deviation (u8 intensity scale).
    pub noise_sigma: f64,
    /// Amplitude of per-slice in-plane misalignment (mm).
    pub misalignment_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            endo_semi_axes: [11.0, 12.0, 20.0],
            epi_semi_axes: [19.0, 20.0, 27.0],
            base_cut_mm: 8.0,
            n_frames: 6,
            contraction: 0.25,
            shortening: 0.12,
            noise_sigma: 6.0,
            misalignment_mm: 0.0,
            seed: 7,
        }
    }
}

/// Everything the phantom produces for one cardiac cycle.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub frames: FrameSequence,
    pub labels: Vec<LabelVolume>,
    /// Ground-truth fields mapping end-diastole coordinates to frame `t`.
    pub fields: Vec<DisplacementField>,
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    /// Ellipsoid center: in-plane at the grid center, along z placed so the
    /// truncated shell is centered in the field of view.
    pub fn center(&self) -> Vec3 {
        let ext = [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a]);
        Vec3::new(
            ext[0] / 2.0,
            ext[1] / 2.0,
            ext[2] / 2.0 + (self.epi_semi_axes[2] - self.base_cut_mm) / 2.0,
        )
    }

    /// Contraction profile `g(t)`; zero at end-diastole, one mid-cycle.
    pub fn profile(&self, t: usize) -> f64 {
        let x = std::f64::consts::PI * t as f64 / (self.n_frames - 1) as f64;
        x.sin().powi(2)
    }

    /// Diagonal of the scaling `S(t)`.
    pub fn scales(&self, t: usize) -> Vec3 {
        let g = self.profile(t);
        let s = 1.0 - self.contraction * g;
        Vec3::new(s, s, 1.0 - self.shortening * g)
    }

    /// End-diastole point to its frame-`t` position.
    pub fn forward(&self, t: usize, x: &Vec3) -> Vec3 {
        let c = self.center();
        c + (x - c).component_mul(&self.scales(t))
    }

    /// Frame-`t` point back to end-diastole.
    pub fn inverse(&self, t: usize, y: &Vec3) -> Vec3 {
        let c = self.center();
        c + (y - c).component_div(&self.scales(t))
    }

    /// Label of an end-diastole point.
    pub fn region_ed(&self, x: &Vec3) -> u8 {
        let d = x - self.center();
        if d.z > self.base_cut_mm {
            return label::BACKGROUND;
        }
        let e = |ax: &[f64; 3]| (d.x / ax[0]).powi(2) + (d.y / ax[1]).powi(2) + (d.z / ax[2]).powi(2);
        if e(&self.epi_semi_axes) > 1.0 {
            label::BACKGROUND
        } else if e(&self.endo_semi_axes) <= 1.0 {
            label::LV_BLOOD_POOL
        } else {
            label::MYOCARDIUM
        }
    }

    /// Label of a physical point in frame `t`.
    pub fn region(&self, t: usize, y: &Vec3) -> u8 {
        self.region_ed(&self.inverse(t, y))
    }

    /// Analytic field `u(x) = (S(t) - I)(x - c)` sampled on the grid.
    pub fn ground_truth_field(&self, t: usize) -> Result<DisplacementField> {
        let grid = self.grid()?;
        Ok(DisplacementField::from_fn(grid, |x| self.forward(t, x) - x))
    }

    /// Analytic field from frame `t` back to end-diastole.
    pub fn inverse_field(&self, t: usize) -> Result<DisplacementField> {
        let grid = self.grid()?;
        Ok(DisplacementField::from_fn(grid, |y| self.inverse(t, y) - y))
    }

    /// Analytic myocardial volume (mm³) at frame `t`, by fine quadrature at
    /// end-diastole scaled by `det S(t)`.
    pub fn myocardial_volume(&self, t: usize) -> f64 {
        let s = self.scales(t);
        self.myocardial_volume_ed() * s.x * s.y * s.z
    }

    fn myocardial_volume_ed(&self) -> f64 {
        let n = 200usize;
        let a = self.epi_semi_axes;
        let lo = Vec3::new(-a[0], -a[1], -a[2]);
        let h = Vec3::new(2.0 * a[0], 2.0 * a[1], a[2] + self.base_cut_mm.min(a[2])) / n as f64;
        let c = self.center();
        let count: usize = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut cnt = 0;
                for j in 0..n {
                    for i in 0..n {
                        let p = c + lo + Vec3::new((i as f64 + 0.5) * h.x, (j as f64 + 0.5) * h.y, (k as f64 + 0.5) * h.z);
                        if self.region_ed(&p) == label::MYOCARDIUM {
                            cnt += 1;
                        }
                    }
                }
                cnt
            })
            .sum();
        count as f64 * h.x * h.y * h.z
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Phantom(m));
        self.grid()?;
        if self.n_frames < 2 {
            return bad(format!("n_frames must be at least 2, got {}", self.n_frames));
        }
        for a in 0..3 {
            if !(self.endo_semi_axes[a] > 0.0) {
                return bad("endocardial semi-axes must be positive".into());
            }
            if !(self.epi_semi_axes[a] > self.endo_semi_axes[a]) {
                return bad(format!(
                    "epicardial semi-axis {a} ({}) must exceed the endocardial one ({})",
                    self.epi_semi_axes[a], self.endo_semi_axes[a]
                ));
            }
        }
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad(format!("contraction must lie in (0, 1), got {}", self.contraction));
        }
        if !(self.shortening >= 0.0 && self.shortening < 1.0) {
            return bad(format!("shortening must lie in [0, 1), got {}", self.shortening));
        }
        if !(self.noise_sigma >= 0.0) || !(self.misalignment_mm >= 0.0) {
            return bad("noise_sigma and misalignment_mm must be non-negative".into());
        }
        if !(self.base_cut_mm > -self.endo_semi_axes[2] && self.base_cut_mm < self.epi_semi_axes[2]) {
            return bad(format!(
                "base_cut_mm must lie inside the endocardium's z-range, got {}",
                self.base_cut_mm
            ));
        }

        // Thinnest wall occurs at peak contraction.
        let s_min = 1.0 - self.contraction;
        let z_min = 1.0 - self.shortening;
        let wall_x = (self.epi_semi_axes[0] - self.endo_semi_axes[0]) * s_min;
        let wall_y = (self.epi_semi_axes[1] - self.endo_semi_axes[1]) * s_min;
        let wall_z = (self.epi_semi_axes[2] - self.endo_semi_axes[2]) * z_min;
        if wall_x < self.spacing[0] || wall_y < self.spacing[1] || wall_z < self.spacing[2] {
            return bad(format!(
                "wall thinner than one voxel at peak contraction ({wall_x:.2}, {wall_y:.2}, {wall_z:.2} mm)"
            ));
        }

        let c = self.center();
        let ext = [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a]);
        let margin = self.misalignment_mm;
        let lo = [
            c.x - self.epi_semi_axes[0] - margin,
            c.y - self.epi_semi_axes[1] - margin,
            c.z - self.epi_semi_axes[2],
        ];
        let hi = [
            c.x + self.epi_semi_axes[0] + margin,
            c.y + self.epi_semi_axes[1] + margin,
            c.z + self.base_cut_mm,
        ];
        for a in 0..3 {
            if lo[a] < self.spacing[a] || hi[a] > ext[a] - self.spacing[a] {
                return bad(format!("phantom does not fit inside the field of view along axis {a}"));
            }
        }
        Ok(())
    }

    /// Label map for frame `t`, classified at voxel centers.
    pub fn labels(&self, t: usize) -> Result<LabelVolume> {
        let grid = self.grid()?;
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| self.region(t, &grid.point_of(idx)))
            .collect();
        LabelVolume::new(grid, data)
    }

    /// Noise-free partial-volume intensity image for frame `t`.
    fn clean_intensities(&self, t: usize, grid: &Grid) -> Vec<f64> {
        let offsets: Vec<f64> = (0..SUPERSAMPLE)
            .map(|s| (s as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
            .collect();
        let n_sub = (SUPERSAMPLE * SUPERSAMPLE * SUPERSAMPLE) as f64;
        (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let p = grid.point_of(idx);
                let mut acc = 0.0;
                for &oz in &offsets {
                    for &oy in &offsets {
                        for &ox in &offsets {
                            let q = p + Vec3::new(ox * grid.spacing[0], oy * grid.spacing[1], oz * grid.spacing[2]);
                            acc += match self.region(t, &q) {
                                label::MYOCARDIUM => MYOCARDIUM_INTENSITY,
                                label::LV_BLOOD_POOL => BLOOD_POOL_INTENSITY,
                                _ => BACKGROUND_INTENSITY,
                            };
                        }
                    }
                }
                acc / n_sub
            })
            .collect()
    }

    /// Image of frame `t`: partial-volume intensities plus Gaussian noise,
    /// quantized to u8. Noise for frame `t` is seeded with `seed + t`.
    pub fn frame(&self, t: usize) -> Result<ImageVolume> {
        let grid = self.grid()?;
        let clean = self.clean_intensities(t, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(t as u64));
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0))
            .map_err(|e| Error::Phantom(format!("noise model: {e}")))?;
        let data = clean
            .into_iter()
            .map(|v| {
                let n = if self.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as f32
            })
            .collect();
        ImageVolume::new(grid, ElementKind::U8, data)
    }
}

/// Builds every frame, label map and ground-truth field of the phantom.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.n_frames;
    let frames = (0..n).map(|t| spec.frame(t)).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|t| spec.labels(t)).collect::<Result<Vec<_>>>()?;
    let fields = (0..n)
        .map(|t| spec.ground_truth_field(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Phantom {
        spec: spec.clone(),
        frames: FrameSequence::new(frames)?,
        labels,
        fields,
    })
}

/// Per-slice misalignment applied by [`inject_misalignment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceShift {
    pub slice: usize,
    /// Applied in-plane shift in mm (a whole number of voxels).
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub dx_vox: i64,
    pub dy_vox: i64,
}

/// Translates every z-slice of every frame and mask by one random in-plane
/// shift per slice, drawn uniformly from `[-amplitude, amplitude]²` mm and
/// rounded to whole voxels. The same shift applies to all frames.
pub fn inject_misalignment(
    labels: &[LabelVolume],
    frames: &FrameSequence,
    amplitude: f64,
    seed: u64,
) -> Result<(FrameSequence, Vec<LabelVolume>, Vec<SliceShift>)> {
    if !(amplitude >= 0.0) {
        return Err(Error::InvalidArgument(format!("misalignment amplitude must be >= 0, got {amplitude}")));
    }
    let grid = *frames.grid();
    for l in labels {
        grid.ensure_same(&l.grid, "misalignment labels")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = grid.dims;
    let mut shifts = Vec::with_capacity(nz);
    for k in 0..nz {
        let (dx, dy) = if amplitude > 0.0 {
            (rng.random_range(-amplitude..=amplitude), rng.random_range(-amplitude..=amplitude))
        } else {
            (0.0, 0.0)
        };
        let dx_vox = (dx / grid.spacing[0]).round() as i64;
        let dy_vox = (dy / grid.spacing[1]).round() as i64;
        shifts.push(SliceShift {
            slice: k,
            dx_mm: dx_vox as f64 * grid.spacing[0],
            dy_mm: dy_vox as f64 * grid.spacing[1],
            dx_vox,
            dy_vox,
        });
    }

    for l in labels {
        for (idx, &v) in l.data.iter().enumerate() {
            if v == label::BACKGROUND {
                continue;
            }
            let [i, j, k] = grid.coords(idx);
            let si = i as i64 + shifts[k].dx_vox;
            let sj = j as i64 + shifts[k].dy_vox;
            if si < 0 || sj < 0 || si >= nx as i64 || sj >= ny as i64 {
                return Err(Error::Phantom(format!(
                    "misalignment of slice {k} pushes anatomy out of the field of view"
                )));
            }
        }
    }

    let vox: Vec<(i64, i64)> = shifts.iter().map(|s| (s.dx_vox, s.dy_vox)).collect();
    let new_frames = frames.frames().iter().map(|f| f.shift_slices(&vox)).collect();
    let new_labels = labels.iter().map(|l| l.shift_slices(&vox)).collect();
    Ok((FrameSequence::new(new_frames)?, new_labels, shifts))
}
