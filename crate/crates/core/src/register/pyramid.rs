//! Image pyramids and field resampling between levels.

use rayon::prelude::*;

use crate::register::DisplacementField;
use crate::volume::{ElementKind, Grid, ImageVolume};

pub(crate) struct Level {
    pub fixed: ImageVolume,
    pub moving: ImageVolume,
    /// 0 is full resolution.
    pub level: usize,
}

/// Rescales both images by the fixed image's range to roughly [0, 1].
pub(crate) fn normalize_pair(fixed: &ImageVolume, moving: &ImageVolume) -> (ImageVolume, ImageVolume) {
    let (lo, hi) = fixed.min_max();
    let range = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let norm = |img: &ImageVolume| ImageVolume {
        grid: img.grid,
        kind: ElementKind::F32,
        data: img.data.iter().map(|&v| ((v as f64 - lo as f64) / range) as f32).collect(),
    };
    (norm(fixed), norm(moving))
}

/// Halves resolution by 2×2×2 averaging. Axes of length 1 are kept.
pub(crate) fn downsample(img: &ImageVolume) -> ImageVolume {
    let g = img.grid;
    let mut dims = [0; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        if g.dims[a] > 1 {
            dims[a] = g.dims[a].div_ceil(2);
            spacing[a] = 2.0 * g.spacing[a];
            origin[a] = g.origin[a] + 0.5 * g.spacing[a];
        } else {
            dims[a] = 1;
            spacing[a] = g.spacing[a];
            origin[a] = g.origin[a];
        }
    }
    let cg = Grid { dims, spacing, origin };
    let data = (0..cg.len())
        .into_par_iter()
        .map(|idx| {
            let c = cg.coords(idx);
            let span = |a: usize| -> [usize; 2] {
                if g.dims[a] > 1 {
                    [2 * c[a], (2 * c[a] + 1).min(g.dims[a] - 1)]
                } else {
                    [0, 0]
                }
            };
            let (sx, sy, sz) = (span(0), span(1), span(2));
            let mut acc = 0.0f64;
            for &k in &sz {
                for &j in &sy {
                    for &i in &sx {
                        acc += img.at(i, j, k) as f64;
                    }
                }
            }
            (acc / 8.0) as f32
        })
        .collect();
    ImageVolume {
        grid: cg,
        kind: ElementKind::F32,
        data,
    }
}

/// Levels from full resolution (index 0) to the coarsest. Stops early once
/// every axis is shorter than 8 voxels.
pub(crate) fn build(fixed: &ImageVolume, moving: &ImageVolume, levels: usize) -> Vec<Level> {
    let mut out = vec![Level {
        fixed: fixed.clone(),
        moving: moving.clone(),
        level: 0,
    }];
    for l in 1..levels {
        let prev = out.last().expect("non-empty");
        if prev.fixed.grid.dims.iter().all(|&n| n < 8) {
            break;
        }
        let next = Level {
            fixed: downsample(&prev.fixed),
            moving: downsample(&prev.moving),
            level: l,
        };
        out.push(next);
    }
    out
}

/// Trilinear resampling of a field onto another grid in physical space.
pub(crate) fn resample_field(field: &DisplacementField, grid: &Grid) -> DisplacementField {
    DisplacementField::from_fn(*grid, |p| field.sample(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let g = Grid::new([4, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let img = ImageVolume::new(g, ElementKind::F32, (0..16).map(|i| (i % 4) as f32).collect()).unwrap();
        let d = downsample(&img);
        assert_eq!(d.grid.dims, [2, 1, 1]);
        assert_eq!(d.grid.origin, [0.5, 0.5, 0.5]);
        assert_eq!(d.data, vec![0.5, 2.5]);
    }

    #[test]
    fn pyramid_depth_is_bounded_by_size() {
        let g = Grid::new([9, 9, 9], [1.0; 3], [0.0; 3]).unwrap();
        let img = ImageVolume::filled(g, ElementKind::F32, 1.0);
        assert_eq!(build(&img, &img, 5).len(), 2);
    }
}
