//! Overlap, surface-distance and correspondence metrics, plus the Welch
//! t-test used to compare methods.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::geom::{InsideTester, TriangleIndex};
use crate::isosurface::SurfaceMesh;
use crate::tetmesh::TetMesh;
use crate::volume::{Grid, LabelVolume, Vec3};

/// `2|A∩B| / (|A| + |B|)` over voxels carrying `label`; 1 when both are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    a.grid.ensure_same(&b.grid, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Labels with `value` every voxel whose center lies inside the surface.
pub fn voxelize(surface: &SurfaceMesh, grid: Grid, value: u8) -> Result<LabelVolume> {
    surface.check_watertight()?;
    let tester = InsideTester::new(&surface.vertices, &surface.triangles);
    let [nx, ny, nz] = grid.dims;
    let mut data = vec![0u8; grid.len()];
    let columns: Vec<(usize, Vec<f64>)> = (0..nx * ny)
        .into_par_iter()
        .map(|c| {
            let p = grid.point(c % nx, c / nx, 0);
            (c, tester.crossings(p.x, p.y))
        })
        .filter(|(_, z)| !z.is_empty())
        .collect();
    for (c, zs) in columns {
        let (i, j) = (c % nx, c / nx);
        for k in 0..nz {
            let z = grid.point(i, j, k).z;
            if zs.iter().filter(|&&h| h > z).count() % 2 == 1 {
                data[grid.index(i, j, k)] = value;
            }
        }
    }
    LabelVolume::new(grid, data)
}

fn distances_to(points: &[Vec3], surface: &SurfaceMesh) -> Vec<f64> {
    let index = TriangleIndex::new(&surface.vertices, &surface.triangles);
    points.par_iter().map(|p| index.distance(p)).collect()
}

fn require_triangles(m: &SurfaceMesh, which: &str) -> Result<()> {
    if m.triangles.is_empty() || m.vertices.is_empty() {
        return Err(Error::Empty(format!("{which} surface has no triangles")));
    }
    Ok(())
}

/// Mean distance from the vertices of `a` to the surface `b`.
pub fn mean_distance_to(a: &SurfaceMesh, b: &SurfaceMesh) -> Result<f64> {
    require_triangles(a, "first")?;
    require_triangles(b, "second")?;
    let d = distances_to(&a.vertices, b);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Symmetric mean absolute distance: the average of the two one-sided mean
/// vertex-to-surface distances.
pub fn mad(a: &SurfaceMesh, b: &SurfaceMesh) -> Result<f64> {
    Ok(0.5 * (mean_distance_to(a, b)? + mean_distance_to(b, a)?))
}

/// Symmetric Hausdorff distance over vertices.
pub fn hausdorff(a: &SurfaceMesh, b: &SurfaceMesh) -> Result<f64> {
    require_triangles(a, "first")?;
    require_triangles(b, "second")?;
    let ab = distances_to(&a.vertices, b).into_iter().fold(0.0, f64::max);
    let ba = distances_to(&b.vertices, a).into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDistance {
    pub mean: f64,
    pub max: f64,
    pub per_vertex: Vec<f64>,
}

/// Distances between vertices with the same id.
pub fn node_distance(a: &[Vec3], b: &[Vec3]) -> Result<NodeDistance> {
    if a.len() != b.len() {
        return Err(Error::Correspondence(format!("{} vs {} vertices", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("no vertices to compare".into()));
    }
    let per_vertex: Vec<f64> = a.iter().zip(b).map(|(p, q)| (p - q).norm()).collect();
    Ok(NodeDistance {
        mean: per_vertex.iter().sum::<f64>() / per_vertex.len() as f64,
        max: per_vertex.iter().copied().fold(0.0, f64::max),
        per_vertex,
    })
}

/// [`node_distance`] for two tet meshes that must share connectivity.
pub fn node_distance_meshes(a: &TetMesh, b: &TetMesh) -> Result<NodeDistance> {
    if a.tets != b.tets {
        return Err(Error::Correspondence("tet connectivity differs".into()));
    }
    node_distance(&a.vertices, &b.vertices)
}

/// Significance tiers: `*` for p < 0.1, `**` for p < 0.05.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    Marginal,
    #[serde(rename = "**")]
    Significant,
}

impl Tier {
    pub fn from_p(p: f64) -> Tier {
        if p < 0.05 {
            Tier::Significant
        } else if p < 0.1 {
            Tier::Marginal
        } else {
            Tier::NotSignificant
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Tier::NotSignificant => "ns",
            Tier::Marginal => "*",
            Tier::Significant => "**",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    pub tier: Tier,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance two-sample t-test.
pub fn ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb {
            (0.0, 1.0)
        } else {
            ((ma - mb).signum() * f64::INFINITY, 0.0)
        };
        return Ok(TTest {
            t,
            df: na + nb - 2.0,
            p,
            tier: Tier::from_p(p),
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p,
        tier: Tier::from_p(p),
    })
}

/// Metrics of one frame; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub dice: Option<f64>,
    pub mad: Option<f64>,
    pub node_mean: Option<f64>,
    pub node_max: Option<f64>,
    pub hausdorff: Option<f64>,
}

impl FrameMetrics {
    fn values(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("dice", self.dice),
            ("mad_mm", self.mad),
            ("node_mean_mm", self.node_mean),
            ("node_max_mm", self.node_max),
            ("hausdorff_mm", self.hausdorff),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    /// Per metric name, over the frames where it is present.
    pub summary: Vec<(String, Summary)>,
    pub ttest: Option<TTest>,
}

impl MetricsReport {
    pub fn new(frames: Vec<FrameMetrics>) -> Self {
        let names = FrameMetrics::default().values().map(|(n, _)| n);
        let summary = names
            .iter()
            .enumerate()
            .filter_map(|(k, name)| {
                let vals: Vec<f64> = frames.iter().filter_map(|f| f.values()[k].1).collect();
                Summary::of(&vals).map(|s| (name.to_string(), s))
            })
            .collect();
        Self {
            frames,
            summary,
            ttest: None,
        }
    }

    /// Checks Dice in [0, 1] and non-negative distances.
    pub fn validate(&self) -> Result<()> {
        for f in &self.frames {
            for (name, v) in f.values() {
                let Some(v) = v else { continue };
                let ok = if name == "dice" { (0.0..=1.0).contains(&v) } else { v >= 0.0 };
                if !ok {
                    return Err(Error::Invariant(format!("frame {}: {name} = {v}", f.frame)));
                }
            }
        }
        Ok(())
    }

    /// `frame,metric,value`, one row per present value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,metric,value\n");
        for f in &self.frames {
            for (name, v) in f.values() {
                if let Some(v) = v {
                    s.push_str(&format!("{},{},{:.9}\n", f.frame, name, v));
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
