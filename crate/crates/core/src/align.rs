//! Inter-slice misalignment correction by stacking LV blood-pool centroids.
//!
//! Each slice is translated in-plane by a whole number of voxels so that its
//! blood-pool centroid lands on a common vertical axis. The axis passes
//! through the median end-diastole centroid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{label, FrameSequence, LabelVolume};

/// How the stacking axis is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceAxis {
    /// Vertical line through the per-axis median of the end-diastole centroids.
    #[default]
    MedianEndDiastole,
}

/// Shift applied to one slice of one frame, in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedShift {
    pub frame: usize,
    pub slice: usize,
    pub dx_vox: i64,
    pub dy_vox: i64,
}

/// Physical in-plane centroid of `which` on slice `k`, or `None` if absent.
pub fn centroid2d(mask: &LabelVolume, k: usize, which: u8) -> Option<(f64, f64)> {
    let g = &mask.grid;
    let [nx, ny, _] = g.dims;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for j in 0..ny {
        for i in 0..nx {
            if mask.at(i, j, k) == which {
                sx += i as f64;
                sy += j as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| {
        (
            g.origin[0] + sx / n as f64 * g.spacing[0],
            g.origin[1] + sy / n as f64 * g.spacing[1],
        )
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-slice voxel shifts moving each slice's centroid onto `(ax, ay)`.
/// Slices without the label inherit the nearest labeled slice's shift
/// (ties go to the lower slice).
fn slice_shifts(mask: &LabelVolume, axis: (f64, f64)) -> Option<Vec<(i64, i64)>> {
    let g = &mask.grid;
    let nz = g.dims[2];
    let own: Vec<Option<(i64, i64)>> = (0..nz)
        .map(|k| {
            centroid2d(mask, k, label::LV_BLOOD_POOL).map(|(cx, cy)| {
                (
                    ((axis.0 - cx) / g.spacing[0]).round() as i64,
                    ((axis.1 - cy) / g.spacing[1]).round() as i64,
                )
            })
        })
        .collect();
    let labeled: Vec<usize> = (0..nz).filter(|&k| own[k].is_some()).collect();
    if labeled.is_empty() {
        return None;
    }
    Some(
        (0..nz)
            .map(|k| {
                own[k].unwrap_or_else(|| {
                    let nearest = labeled
                        .iter()
                        .copied()
                        .min_by_key(|&l| (l as i64 - k as i64).unsigned_abs())
                        .expect("non-empty");
                    own[nearest].expect("labeled")
                })
            })
            .collect(),
    )
}

/// Stacks slices collinearly. Each frame uses its own centroids; the target
/// axis is fixed from the end-diastole mask. Images and masks receive the
/// same integer shift.
pub fn correct(
    frames: &FrameSequence,
    masks: &[LabelVolume],
    policy: ReferenceAxis,
) -> Result<(FrameSequence, Vec<LabelVolume>, Vec<AppliedShift>)> {
    if masks.len() != frames.len() {
        return Err(Error::Align(format!(
            "{} masks for {} frames",
            masks.len(),
            frames.len()
        )));
    }
    let grid = frames.grid();
    for m in masks {
        grid.ensure_same(&m.grid, "alignment mask")?;
    }

    let axis = match policy {
        ReferenceAxis::MedianEndDiastole => {
            let ed = &masks[0];
            let cs: Vec<(f64, f64)> = (0..grid.dims[2])
                .filter_map(|k| centroid2d(ed, k, label::LV_BLOOD_POOL))
                .collect();
            if cs.is_empty() {
                return Err(Error::Align("no end-diastole slice contains the LV blood pool".into()));
            }
            (
                median(cs.iter().map(|c| c.0).collect()),
                median(cs.iter().map(|c| c.1).collect()),
            )
        }
    };

    let mut out_frames = Vec::with_capacity(frames.len());
    let mut out_masks = Vec::with_capacity(frames.len());
    let mut applied = Vec::new();
    for (t, (frame, mask)) in frames.frames().iter().zip(masks).enumerate() {
        let shifts = slice_shifts(mask, axis)
            .ok_or_else(|| Error::Align(format!("frame {t} has no slice with the LV blood pool")))?;
        out_frames.push(frame.shift_slices(&shifts));
        out_masks.push(mask.shift_slices(&shifts));
        applied.extend(shifts.iter().enumerate().map(|(k, &(dx, dy))| AppliedShift {
            frame: t,
            slice: k,
            dx_vox: dx,
            dy_vox: dy,
        }));
    }
    Ok((FrameSequence::new(out_frames)?, out_masks, applied))
}

/// Writes shifts as `frame,slice,dx_vox,dy_vox` CSV.
pub fn shifts_csv(shifts: &[AppliedShift]) -> String {
    let mut s = String::from("frame,slice,dx_vox,dy_vox\n");
    for sh in shifts {
        s.push_str(&format!("{},{},{},{}\n", sh.frame, sh.slice, sh.dx_vox, sh.dy_vox));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{ElementKind, Grid, ImageVolume};

    fn disk_mask(grid: Grid, centers: &[(f64, f64)], r: f64) -> LabelVolume {
        let mut l = LabelVolume::empty(grid);
        for (k, &(cx, cy)) in centers.iter().enumerate() {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let p = grid.point(i, j, k);
                    if (p.x - cx).powi(2) + (p.y - cy).powi(2) <= r * r {
                        l.data[grid.index(i, j, k)] = label::LV_BLOOD_POOL;
                    }
                }
            }
        }
        l
    }

    #[test]
    fn single_voxel_centroid() {
        let g = Grid::new([8, 8, 1], [1.5, 2.0, 1.0], [1.0, -2.0, 0.0]).unwrap();
        let mut l = LabelVolume::empty(g);
        l.data[g.index(3, 5, 0)] = label::LV_BLOOD_POOL;
        assert_eq!(centroid2d(&l, 0, label::LV_BLOOD_POOL), Some((1.0 + 4.5, -2.0 + 10.0)));
        assert_eq!(centroid2d(&l, 0, label::MYOCARDIUM), None);
    }

    #[test]
    fn symmetric_disk_centroid() {
        let g = Grid::new([21, 21, 1], [1.0; 3], [0.0; 3]).unwrap();
        let l = disk_mask(g, &[(10.0, 10.0)], 6.0);
        let (cx, cy) = centroid2d(&l, 0, label::LV_BLOOD_POOL).unwrap();
        assert!((cx - 10.0).abs() < 1e-12 && (cy - 10.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_stack_needs_no_shift() {
        let g = Grid::new([24, 24, 5], [1.0; 3], [0.0; 3]).unwrap();
        let m = disk_mask(g, &[(12.0, 11.0); 5], 4.0);
        let img = ImageVolume::filled(g, ElementKind::U8, 1.0);
        let frames = FrameSequence::new(vec![img.clone(), img]).unwrap();
        let (_, _, shifts) = correct(&frames, &[m.clone(), m], ReferenceAxis::default()).unwrap();
        assert!(shifts.iter().all(|s| s.dx_vox == 0 && s.dy_vox == 0));
    }

    #[test]
    fn misaligned_stack_is_restored_and_idempotent() {
        let g = Grid::new([30, 30, 6], [1.0; 3], [0.0; 3]).unwrap();
        let centers = [(15.0, 15.0), (17.0, 14.0), (13.0, 16.0), (15.0, 15.0), (14.0, 18.0), (15.0, 15.0)];
        let m = disk_mask(g, &centers, 4.0);
        let img = m.indicator(label::LV_BLOOD_POOL);
        let frames = FrameSequence::new(vec![img.clone(), img]).unwrap();
        let (f1, m1, shifts) = correct(&frames, &[m.clone(), m], ReferenceAxis::default()).unwrap();
        for (k, &(cx, cy)) in centers.iter().enumerate() {
            let s = shifts[k];
            assert_eq!((s.dx_vox, s.dy_vox), ((15.0 - cx) as i64, (15.0 - cy) as i64));
        }
        let (f2, m2, again) = correct(&f1, &m1, ReferenceAxis::default()).unwrap();
        assert!(again.iter().all(|s| s.dx_vox == 0 && s.dy_vox == 0));
        assert_eq!(m2, m1);
        assert_eq!(f2.frame(1).data, f1.frame(1).data);
    }

    #[test]
    fn unlabeled_slices_inherit_nearest_shift() {
        let g = Grid::new([20, 20, 4], [1.0; 3], [0.0; 3]).unwrap();
        let mut m = disk_mask(g, &[(10.0, 10.0), (12.0, 10.0), (10.0, 10.0), (10.0, 10.0)], 3.0);
        for j in 0..20 {
            for i in 0..20 {
                m.data[g.index(i, j, 0)] = 0;
            }
        }
        let shifts = slice_shifts(&m, (10.0, 10.0)).unwrap();
        assert_eq!(shifts[0], shifts[1]);
        assert_eq!(shifts[1], (-2, 0));
    }

    #[test]
    fn single_slice_is_identity() {
        let g = Grid::new([20, 20, 1], [1.0; 3], [0.0; 3]).unwrap();
        let m = disk_mask(g, &[(7.0, 12.0)], 3.0);
        let img = ImageVolume::filled(g, ElementKind::U8, 0.0);
        let frames = FrameSequence::new(vec![img.clone(), img]).unwrap();
        let (_, _, s) = correct(&frames, &[m.clone(), m], ReferenceAxis::default()).unwrap();
        assert!(s.iter().all(|s| s.dx_vox == 0 && s.dy_vox == 0));
    }

    #[test]
    fn missing_label_is_an_error() {
        let g = Grid::new([5, 5, 3], [1.0; 3], [0.0; 3]).unwrap();
        let m = LabelVolume::empty(g);
        let img = ImageVolume::filled(g, ElementKind::U8, 0.0);
        let frames = FrameSequence::new(vec![img.clone(), img]).unwrap();
        assert!(matches!(
            correct(&frames, &[m.clone(), m], ReferenceAxis::default()),
            Err(Error::Align(_))
        ));
    }
}
