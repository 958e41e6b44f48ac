//! Dense displacement fields, composition and image warping.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{mhd, ElementKind, Grid, ImageVolume, Vec3};

/// Per-voxel displacement (mm) on the fixed image grid. A fixed-frame point
/// `x` corresponds to `x + u(x)` in the moving frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    pub u: Vec<Vec3>,
}

impl DisplacementField {
    pub fn new(grid: Grid, u: Vec<Vec3>) -> Result<Self> {
        if u.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "field has {} vectors for {} voxels",
                u.len(),
                grid.len()
            )));
        }
        if u.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("field contains non-finite components".into()));
        }
        Ok(Self { grid, u })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            u: vec![Vec3::zeros(); grid.len()],
        }
    }

    /// Field whose value at each voxel center `x` is `f(x)`.
    pub fn from_fn<F: Fn(&Vec3) -> Vec3 + Sync>(grid: Grid, f: F) -> Self {
        let u = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(&grid.point_of(idx)))
            .collect();
        Self { grid, u }
    }

    /// Trilinear sample at a physical point, clamped at the grid edge.
    #[inline]
    pub fn sample(&self, p: &Vec3) -> Vec3 {
        let s = self.grid.stencil(p);
        let mut acc = Vec3::zeros();
        for (idx, w) in s.taps(&self.grid) {
            acc += self.u[idx] * w;
        }
        acc
    }

    /// Maps a fixed-frame point into the moving frame.
    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p + self.sample(p)
    }

    pub fn max_norm(&self) -> f64 {
        self.u.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Mean Euclidean difference to another field on the same grid,
    /// optionally restricted to voxels where `mask` is true.
    pub fn mean_endpoint_error(&self, other: &DisplacementField, mask: Option<&[bool]>) -> Result<f64> {
        self.grid.ensure_same(&other.grid, "endpoint error")?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (idx, (a, b)) in self.u.iter().zip(&other.u).enumerate() {
            if mask.is_none_or(|m| m[idx]) {
                sum += (a - b).norm();
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("endpoint error mask selects no voxels".into()));
        }
        Ok(sum / n as f64)
    }

    /// Composition `x -> u_ab(x) + u_bc(x + u_ab(x))`, on this field's grid.
    pub fn compose(&self, next: &DisplacementField) -> DisplacementField {
        compose_fields(self, next)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let v: Vec<[f32; 3]> = self.u.iter().map(|u| [u.x as f32, u.y as f32, u.z as f32]).collect();
        mhd::write_vectors(&self.grid, &v, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (grid, v) = mhd::read_vectors(path)?;
        let u = v
            .into_iter()
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        DisplacementField::new(grid, u)
    }
}

/// Concatenates `a -> b` with `b -> c` into `a -> c`. The second field is
/// sampled trilinearly; the result lives on the first field's grid.
pub fn compose_fields(f_ab: &DisplacementField, f_bc: &DisplacementField) -> DisplacementField {
    let grid = f_ab.grid;
    let u = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point_of(idx);
            let ua = f_ab.u[idx];
            ua + f_bc.sample(&(x + ua))
        })
        .collect();
    DisplacementField { grid, u }
}

/// Resamples `moving` through the field: `out(x) = moving(x + u(x))`.
/// The result is on the field's grid and stored as `f32`.
pub fn warp_image(moving: &ImageVolume, field: &DisplacementField) -> ImageVolume {
    let grid = field.grid;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let x = grid.point_of(idx);
            moving.sample_trilinear(&(x + field.u[idx])) as f32
        })
        .collect();
    ImageVolume {
        grid,
        kind: ElementKind::F32,
        data,
    }
}
