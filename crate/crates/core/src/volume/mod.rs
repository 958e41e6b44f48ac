//! Voxel grids, scalar and label volumes, interpolation and z-resampling.
//!
//! Physical coordinates are in millimetres. Voxel `(i, j, k)` sits at
//! `origin + (i·sx, j·sy, k·sz)` and data is stored x-fastest, z-slowest.

pub mod mhd;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Label codes used throughout the crate (ACDC numbering).
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const RV_BLOOD_POOL: u8 = 1;
    pub const MYOCARDIUM: u8 = 2;
    pub const LV_BLOOD_POOL: u8 = 3;
    pub const MAX: u8 = 3;
}

/// Regular voxel lattice in physical space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of a voxel center.
    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    #[inline]
    pub fn point_of(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.point(i, j, k)
    }

    /// Continuous (fractional) voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: &Vec3) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Whether a physical point lies within the hull of voxel centers.
    pub fn contains(&self, p: &Vec3) -> bool {
        let c = self.continuous_index(p);
        (0..3).all(|a| c[a] >= 0.0 && c[a] <= (self.dims[a] - 1) as f64)
    }

    /// Physical extent covered by voxel centers along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Grids agree when dims match exactly and geometry agrees to 1e-9 mm.
    pub fn same_as(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= 1e-9
                    && (self.origin[a] - other.origin[a]).abs() <= 1e-9
            })
    }

    pub fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }

    /// Trilinear stencil at a physical point with edge clamping.
    #[inline]
    pub fn stencil(&self, p: &Vec3) -> Stencil {
        let c = self.continuous_index(p);
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut inside = [false; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let hi = (n - 1) as f64;
            if n == 1 {
                base[a] = 0;
                next[a] = 0;
                frac[a] = 0.0;
                inside[a] = false;
                continue;
            }
            let (x, clamped) = if c[a] <= 0.0 {
                (0.0, c[a] < 0.0)
            } else if c[a] >= hi {
                (hi, c[a] > hi)
            } else {
                (c[a], false)
            };
            let i0 = (x.floor() as usize).min(n - 2);
            base[a] = i0;
            next[a] = i0 + 1;
            frac[a] = x - i0 as f64;
            inside[a] = !clamped;
        }
        Stencil { base, next, frac, inside }
    }
}

/// Eight-voxel trilinear interpolation stencil.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub base: [usize; 3],
    pub next: [usize; 3],
    pub frac: [f64; 3],
    /// False along an axis where the point was clamped (zero derivative there).
    pub inside: [bool; 3],
}

impl Stencil {
    /// The 8 (flat index, weight) pairs.
    #[inline]
    pub fn taps(&self, grid: &Grid) -> [(usize, f64); 8] {
        let [fx, fy, fz] = self.frac;
        let xs = [(self.base[0], 1.0 - fx), (self.next[0], fx)];
        let ys = [(self.base[1], 1.0 - fy), (self.next[1], fy)];
        let zs = [(self.base[2], 1.0 - fz), (self.next[2], fz)];
        let mut out = [(0usize, 0f64); 8];
        let mut n = 0;
        for &(k, wz) in &zs {
            for &(j, wy) in &ys {
                for &(i, wx) in &xs {
                    out[n] = (grid.index(i, j, k), wx * wy * wz);
                    n += 1;
                }
            }
        }
        out
    }

    /// Interpolated value and its gradient with respect to physical position.
    #[inline]
    pub fn value_and_gradient<F: Fn(usize) -> f64>(&self, grid: &Grid, get: F) -> (f64, Vec3) {
        let [fx, fy, fz] = self.frac;
        let v = |i: usize, j: usize, k: usize| get(grid.index(i, j, k));
        let (i0, i1) = (self.base[0], self.next[0]);
        let (j0, j1) = (self.base[1], self.next[1]);
        let (k0, k1) = (self.base[2], self.next[2]);
        let c000 = v(i0, j0, k0);
        let c100 = v(i1, j0, k0);
        let c010 = v(i0, j1, k0);
        let c110 = v(i1, j1, k0);
        let c001 = v(i0, j0, k1);
        let c101 = v(i1, j0, k1);
        let c011 = v(i0, j1, k1);
        let c111 = v(i1, j1, k1);
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        let value = c0 + (c1 - c0) * fz;

        let mut g = Vec3::zeros();
        if self.inside[0] {
            let d00 = c100 - c000;
            let d10 = c110 - c010;
            let d01 = c101 - c001;
            let d11 = c111 - c011;
            let d0 = d00 + (d10 - d00) * fy;
            let d1 = d01 + (d11 - d01) * fy;
            g.x = (d0 + (d1 - d0) * fz) / grid.spacing[0];
        }
        if self.inside[1] {
            let e0 = c10 - c00;
            let e1 = c11 - c01;
            g.y = (e0 + (e1 - e0) * fz) / grid.spacing[1];
        }
        if self.inside[2] {
            g.z = (c1 - c0) / grid.spacing[2];
        }
        (value, g)
    }
}

/// Storage type of a scalar volume on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    U8,
    I16,
    F32,
}

impl ElementKind {
    pub fn byte_size(self) -> usize {
        match self {
            ElementKind::U8 => 1,
            ElementKind::I16 => 2,
            ElementKind::F32 => 4,
        }
    }

    pub fn met_name(self) -> &'static str {
        match self {
            ElementKind::U8 => "MET_UCHAR",
            ElementKind::I16 => "MET_SHORT",
            ElementKind::F32 => "MET_FLOAT",
        }
    }

    pub fn from_met_name(name: &str) -> Option<Self> {
        match name {
            "MET_UCHAR" => Some(ElementKind::U8),
            "MET_SHORT" => Some(ElementKind::I16),
            "MET_FLOAT" => Some(ElementKind::F32),
            _ => None,
        }
    }
}

/// Scalar image on a grid. Values are held as `f32`, which represents every
/// `u8` and `i16` exactly, so the declared [`ElementKind`] round-trips.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    pub grid: Grid,
    pub kind: ElementKind,
    pub data: Vec<f32>,
}

impl ImageVolume {
    pub fn new(grid: Grid, kind: ElementKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, kind, data })
    }

    pub fn filled(grid: Grid, kind: ElementKind, value: f32) -> Self {
        Self {
            grid,
            kind,
            data: vec![value; grid.len()],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Trilinear interpolation at a physical point; outside the grid the
    /// nearest edge value is used.
    #[inline]
    pub fn sample_trilinear(&self, p: &Vec3) -> f64 {
        let s = self.grid.stencil(p);
        s.taps(&self.grid)
            .iter()
            .map(|&(idx, w)| w * self.data[idx] as f64)
            .sum()
    }

    #[inline]
    pub fn sample_with_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        let s = self.grid.stencil(p);
        s.value_and_gradient(&self.grid, |idx| self.data[idx] as f64)
    }

    /// Resample along z to a new slice thickness with linear interpolation.
    pub fn resample_z(&self, new_sz_mm: f64) -> Result<ImageVolume> {
        let (grid, source_z) = resampled_z_grid(&self.grid, new_sz_mm)?;
        let [nx, ny, _] = grid.dims;
        let nz_src = self.grid.dims[2];
        let mut data = Vec::with_capacity(grid.len());
        for &cz in &source_z {
            let cz = cz.clamp(0.0, (nz_src - 1) as f64);
            let k0 = (cz.floor() as usize).min(nz_src.saturating_sub(2));
            let k1 = (k0 + 1).min(nz_src - 1);
            let f = (cz - k0 as f64) as f32;
            for j in 0..ny {
                for i in 0..nx {
                    let a = self.at(i, j, k0);
                    let b = self.at(i, j, k1);
                    data.push(a + (b - a) * f);
                }
            }
        }
        let kind = if self.kind == ElementKind::F32 || data.iter().all(|v| v.fract() == 0.0) {
            self.kind
        } else {
            ElementKind::F32
        };
        ImageVolume::new(grid, kind, data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Integer segmentation on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "label data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&l| l > label::MAX) {
            return Err(Error::InvalidArgument(format!("label value {bad} outside 0..=3")));
        }
        Ok(Self { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![label::BACKGROUND; grid.len()],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn count(&self, which: u8) -> usize {
        self.data.iter().filter(|&&l| l == which).count()
    }

    /// Resample along z by nearest-neighbor, never creating new labels.
    pub fn resample_z(&self, new_sz_mm: f64) -> Result<LabelVolume> {
        let (grid, source_z) = resampled_z_grid(&self.grid, new_sz_mm)?;
        let [nx, ny, _] = grid.dims;
        let nz_src = self.grid.dims[2];
        let mut data = Vec::with_capacity(grid.len());
        for &cz in &source_z {
            let k = (cz.round().max(0.0) as usize).min(nz_src - 1);
            for j in 0..ny {
                for i in 0..nx {
                    data.push(self.at(i, j, k));
                }
            }
        }
        LabelVolume::new(grid, data)
    }

    /// Binary mask of one label as an `f32` image (1 inside, 0 outside).
    pub fn indicator(&self, which: u8) -> ImageVolume {
        ImageVolume {
            grid: self.grid,
            kind: ElementKind::U8,
            data: self.data.iter().map(|&l| if l == which { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Translate every z-slice in-plane by a whole number of voxels, replicating
/// edge values. `shifts[k] = (dx, dy)` moves slice `k` content by `+dx, +dy`.
pub(crate) fn shift_slices<T: Copy>(grid: &Grid, data: &[T], shifts: &[(i64, i64)]) -> Vec<T> {
    let [nx, ny, nz] = grid.dims;
    debug_assert_eq!(shifts.len(), nz);
    let mut out = Vec::with_capacity(data.len());
    for (k, &(dx, dy)) in shifts.iter().enumerate() {
        for j in 0..ny {
            let sj = (j as i64 - dy).clamp(0, ny as i64 - 1) as usize;
            for i in 0..nx {
                let si = (i as i64 - dx).clamp(0, nx as i64 - 1) as usize;
                out.push(data[grid.index(si, sj, k)]);
            }
        }
    }
    out
}

impl ImageVolume {
    pub fn shift_slices(&self, shifts: &[(i64, i64)]) -> ImageVolume {
        ImageVolume {
            grid: self.grid,
            kind: self.kind,
            data: shift_slices(&self.grid, &self.data, shifts),
        }
    }
}

impl LabelVolume {
    pub fn shift_slices(&self, shifts: &[(i64, i64)]) -> LabelVolume {
        LabelVolume {
            grid: self.grid,
            data: shift_slices(&self.grid, &self.data, shifts),
        }
    }
}

/// Output grid for a z-resampling and the continuous source slice index of
/// every output slice.
fn resampled_z_grid(grid: &Grid, new_sz_mm: f64) -> Result<(Grid, Vec<f64>)> {
    if !(new_sz_mm > 0.0) || !new_sz_mm.is_finite() {
        return Err(Error::InvalidArgument(format!("slice thickness must be positive, got {new_sz_mm}")));
    }
    let sz = grid.spacing[2];
    let nz_new = (grid.dims[2] as f64 * sz / new_sz_mm).round() as usize;
    if nz_new < 2 {
        return Err(Error::InvalidArgument(format!(
            "resampling {} slices of {sz} mm to {new_sz_mm} mm leaves {nz_new} slice(s)",
            grid.dims[2]
        )));
    }
    let out = Grid::new(
        [grid.dims[0], grid.dims[1], nz_new],
        [grid.spacing[0], grid.spacing[1], new_sz_mm],
        grid.origin,
    )?;
    let source_z = (0..nz_new).map(|k| k as f64 * new_sz_mm / sz).collect();
    Ok((out, source_z))
}

/// Ordered 3D frames over one cardiac cycle sharing one grid. Frame 0 is
/// end-diastole.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Vec<ImageVolume>,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageVolume>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a frame sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let g = frames[0].grid;
        for (t, f) in frames.iter().enumerate().skip(1) {
            g.ensure_same(&f.grid, &format!("frame {t} vs end-diastole"))?;
        }
        Ok(Self { frames })
    }

    pub fn grid(&self) -> &Grid {
        &self.frames[0].grid
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[ImageVolume] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &ImageVolume {
        &self.frames[t]
    }

    pub fn end_diastole(&self) -> &ImageVolume {
        &self.frames[0]
    }

    pub fn into_frames(self) -> Vec<ImageVolume> {
        self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: [usize; 3]) -> Grid {
        Grid::new(n, [1.0, 2.0, 0.5], [-3.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn sampling_at_voxel_center_is_exact() {
        let g = grid([4, 3, 5]);
        let data: Vec<f32> = (0..g.len()).map(|i| (i * 7 % 13) as f32).collect();
        let v = ImageVolume::new(g, ElementKind::F32, data).unwrap();
        for idx in 0..g.len() {
            assert_eq!(v.sample_trilinear(&g.point_of(idx)), v.data[idx] as f64);
        }
    }

    #[test]
    fn midpoint_between_zero_and_one() {
        let g = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = ImageVolume::new(g, ElementKind::F32, vec![0.0, 1.0]).unwrap();
        assert_eq!(v.sample_trilinear(&Vec3::new(0.5, 0.0, 0.0)), 0.5);
    }

    #[test]
    fn constant_volume_sampled_anywhere() {
        let g = grid([3, 3, 3]);
        let v = ImageVolume::filled(g, ElementKind::F32, 4.25);
        for p in [Vec3::new(-100.0, 3.0, 2.2), Vec3::new(0.1, 2.3, 2.7), Vec3::new(9.0, 9.0, 9.0)] {
            assert!((v.sample_trilinear(&p) - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_field_reproduced_in_interior() {
        let g = grid([5, 6, 7]);
        let f = |p: Vec3| 0.5 + 2.0 * p.x - 1.5 * p.y + 0.25 * p.z;
        let data: Vec<f32> = (0..g.len()).map(|i| f(g.point_of(i)) as f32).collect();
        let v = ImageVolume::new(g, ElementKind::F32, data).unwrap();
        let p = Vec3::new(-1.3, 4.7, 3.9);
        assert!((v.sample_trilinear(&p) - f(p)).abs() < 1e-5);
        let (_, grad) = v.sample_with_gradient(&p);
        assert!((grad - Vec3::new(2.0, -1.5, 0.25)).norm() < 1e-5);
    }

    #[test]
    fn outside_points_clamp_to_edge() {
        let g = Grid::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = ImageVolume::new(g, ElementKind::F32, vec![3.0, 5.0]).unwrap();
        assert_eq!(v.sample_trilinear(&Vec3::new(-4.0, 0.0, 0.0)), 3.0);
        assert_eq!(v.sample_trilinear(&Vec3::new(7.0, 3.0, -1.0)), 5.0);
        let (_, grad) = v.sample_with_gradient(&Vec3::new(7.0, 0.0, 0.0));
        assert_eq!(grad.x, 0.0);
    }

    #[test]
    fn resample_ten_mm_to_one_mm() {
        let g = Grid::new([4, 4, 10], [1.5, 1.5, 10.0], [0.0; 3]).unwrap();
        let v = ImageVolume::filled(g, ElementKind::U8, 7.0);
        let r = v.resample_z(1.0).unwrap();
        assert_eq!(r.grid.dims, [4, 4, 100]);
        assert_eq!(r.grid.spacing[2], 1.0);
    }

    #[test]
    fn resample_identity() {
        let g = grid([3, 2, 4]);
        let data: Vec<f32> = (0..g.len()).map(|i| i as f32).collect();
        let v = ImageVolume::new(g, ElementKind::F32, data).unwrap();
        assert_eq!(v.resample_z(0.5).unwrap(), v);
        let l = LabelVolume::new(g, (0..g.len()).map(|i| (i % 4) as u8).collect()).unwrap();
        assert_eq!(l.resample_z(0.5).unwrap(), l);
    }

    #[test]
    fn nearest_resampling_keeps_label_set() {
        let g = Grid::new([2, 2, 2], [1.0, 1.0, 6.0], [0.0; 3]).unwrap();
        let l = LabelVolume::new(g, vec![0, 2, 2, 0, 3, 3, 1, 0]).unwrap();
        let r = l.resample_z(1.0).unwrap();
        assert_eq!(r.grid.dims[2], 12);
        assert!(r.data.iter().all(|v| [0, 1, 2, 3].contains(v)));
        for v in [0u8, 1, 2, 3] {
            assert!(r.data.contains(&v));
        }
    }

    #[test]
    fn degenerate_resample_rejected() {
        let g = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(ImageVolume::filled(g, ElementKind::U8, 0.0).resample_z(5.0).is_err());
        assert!(ImageVolume::filled(g, ElementKind::U8, 0.0).resample_z(0.0).is_err());
    }

    #[test]
    fn frame_sequence_requires_shared_grid() {
        let a = ImageVolume::filled(grid([2, 2, 2]), ElementKind::U8, 0.0);
        let b = ImageVolume::filled(grid([2, 2, 3]), ElementKind::U8, 0.0);
        assert!(FrameSequence::new(vec![a.clone()]).is_err());
        assert!(FrameSequence::new(vec![a.clone(), b]).is_err());
        assert_eq!(FrameSequence::new(vec![a.clone(), a]).unwrap().len(), 2);
    }
}
