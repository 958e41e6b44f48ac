//! End-to-end driver: images in, meshes, metrics and a checksummed manifest out.
//!
//! Stages run in order with a barrier between them; work inside a stage fans
//! out over frames. Every random stream is derived from the root seed and the
//! stage name, so a stage can be rerun on its own with the same result.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{self, ReferenceAxis};
use crate::error::{Error, Result};
use crate::io;
use crate::isosurface::{decimate, marching_cubes, propagate_surface, IsoPolicy, SurfaceMesh, DEFAULT_TARGET_VERTICES};
use crate::lbwarp;
use crate::metrics::{self, FrameMetrics, MetricsReport, TTest};
use crate::phantom::{self, PhantomSpec};
use crate::register::{self, Backend, DisplacementField, Pairing, RegistrationConfig, RegistrationOutcome};
use crate::tetmesh::{self, QualityReport, DEFAULT_MAX_VOLUME};
use crate::volume::{label, mhd, FrameSequence, LabelVolume};

/// Dense-backend λ used when the config does not set one. The configured
/// library default of 1e-3 overfits the noisy phantom.
pub const PIPELINE_DENSE_LAMBDA: f64 = 10.0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_JSON: &str = "metrics.json";

/// 64-bit seed for `stage` derived from the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// One MetaImage per frame, end-diastole first.
    pub frames: Vec<PathBuf>,
    /// Label masks matching `frames` (0 background, 1 RV, 2 myocardium, 3 LV).
    pub labels: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub enabled: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub target_vertices: usize,
    /// Maximum tet volume (mm³).
    pub max_volume: f64,
    pub iso_policy: IsoPolicy,
    /// Isotropic spacing (mm) the labels are resampled to along z before
    /// surface extraction; defaults to the in-plane spacing.
    pub resample_z_mm: Option<f64>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            target_vertices: DEFAULT_TARGET_VERTICES,
            max_volume: DEFAULT_MAX_VOLUME,
            iso_policy: IsoPolicy::default(),
            resample_z_mm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub write_fields: bool,
    /// Also write the (aligned) frames and masks.
    pub write_volumes: bool,
    pub write_ply: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            write_fields: true,
            write_volumes: false,
            write_ply: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: Option<PathBuf>,
    /// Fixed reference is required; sequential is optional.
    pub pairings: Vec<Pairing>,
    pub phantom: Option<PhantomSpec>,
    pub input: Option<InputConfig>,
    pub align: AlignConfig,
    pub registration: RegistrationConfig,
    pub mesh: MeshConfig,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: None,
            pairings: vec![Pairing::FixedReference],
            phantom: Some(PhantomSpec::default()),
            input: None,
            align: AlignConfig::default(),
            registration: RegistrationConfig {
                lambda: PIPELINE_DENSE_LAMBDA,
                ..RegistrationConfig::default()
            },
            mesh: MeshConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML and validates it. An `[input]` table replaces the default
    /// phantom; λ left unset takes the per-backend pipeline default.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg: PipelineConfig = table.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if table.contains_key("input") && !table.contains_key("phantom") {
            cfg.phantom = None;
        }
        let lambda_set = table
            .get("registration")
            .and_then(|r| r.as_table())
            .is_some_and(|r| r.contains_key("lambda"));
        if !lambda_set {
            cfg.registration.lambda = match cfg.registration.backend {
                Backend::Dense => PIPELINE_DENSE_LAMBDA,
                Backend::Ffd => RegistrationConfig::default().lambda,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside become relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(input) = &mut cfg.input {
            input.frames.iter_mut().for_each(fix);
            input.labels.iter_mut().for_each(fix);
        }
        if let Some(out) = &mut cfg.output_dir {
            fix(out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match (&self.phantom, &self.input) {
            (Some(_), Some(_)) => return bad("give either [phantom] or [input], not both".into()),
            (None, None) => return bad("one of [phantom] or [input] is required".into()),
            (Some(p), None) => p.validate().map_err(|e| Error::Config(format!("[phantom]: {e}")))?,
            (None, Some(i)) => {
                if i.frames.len() < 2 {
                    return bad(format!("[input].frames needs at least 2 frames, got {}", i.frames.len()));
                }
                if i.labels.len() != i.frames.len() {
                    return bad(format!(
                        "[input].labels has {} entries for {} frames",
                        i.labels.len(),
                        i.frames.len()
                    ));
                }
            }
        }
        if !self.pairings.contains(&Pairing::FixedReference) {
            return bad("pairings must include \"fixed_reference\"".into());
        }
        let mut sorted = self.pairings.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.pairings.len() {
            return bad("pairings lists each of \"fixed_reference\" and \"sequential\" at most once".into());
        }
        self.registration
            .validate()
            .map_err(|e| Error::Config(format!("[registration]: {e}")))?;
        if self.mesh.target_vertices < 4 {
            return bad(format!("[mesh].target_vertices must be >= 4, got {}", self.mesh.target_vertices));
        }
        if !(self.mesh.max_volume > 0.0) || !self.mesh.max_volume.is_finite() {
            return bad(format!("[mesh].max_volume must be positive, got {}", self.mesh.max_volume));
        }
        if let Some(z) = self.mesh.resample_z_mm {
            if !(z > 0.0) {
                return bad(format!("[mesh].resample_z_mm must be positive, got {z}"));
            }
        }
        Ok(())
    }

    fn pairing_enabled(&self, p: Pairing) -> bool {
        self.pairings.contains(&p)
    }
}

fn pairing_name(p: Pairing) -> &'static str {
    match p {
        Pairing::FixedReference => "fixed_reference",
        Pairing::Sequential => "sequential",
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest, `/`-separated.
    pub path: String,
    pub kind: String,
    pub frame: Option<usize>,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub root_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub config: PipelineConfig,
    pub n_frames: usize,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn files_of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.files.iter().filter(move |e| e.kind == kind)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects artifacts as they are written.
struct Artifacts {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Artifacts {
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str, kind: &str, frame: Option<usize>) -> Result<()> {
        let p = self.root.join(rel);
        let bytes = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        self.entries.push(ManifestEntry {
            path: rel.to_string(),
            kind: kind.to_string(),
            frame,
            bytes,
            sha256: sha256_file(&p)?,
        });
        Ok(())
    }

    fn text(&mut self, rel: &str, kind: &str, frame: Option<usize>, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.record(rel, kind, frame)
    }

    /// Header and payload of a MetaImage pair.
    fn mhd<F: FnOnce(&Path) -> Result<()>>(&mut self, rel: &str, kind: &str, frame: Option<usize>, write: F) -> Result<()> {
        write(&self.path(rel)?)?;
        self.record(rel, kind, frame)?;
        let raw = Path::new(rel).with_extension("raw");
        self.record(&raw.to_string_lossy().replace('\\', "/"), &format!("{kind}_raw"), frame)
    }
}

/// Comparison of one method against a reference over all frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub candidate: String,
    pub reference: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub comparisons: Vec<Comparison>,
    /// Welch test of per-frame MAD, fixed reference against sequential,
    /// over frames after end-diastole.
    pub mad_ttest: Option<TTest>,
}

/// What a run produced, beyond the files on disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub metrics: MetricsFile,
    /// Wall-clock seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

struct Source {
    frames: FrameSequence,
    labels: Vec<LabelVolume>,
    /// Analytic end-diastole-to-frame fields, phantom only.
    truth: Option<Vec<DisplacementField>>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage(name, None),
    })
}

fn load_source(cfg: &PipelineConfig, seeds: &mut BTreeMap<String, u64>, art: &mut Artifacts) -> Result<Source> {
    if let Some(spec) = &cfg.phantom {
        let seed = stage_seed(cfg.seed, "phantom");
        seeds.insert("phantom".into(), seed);
        let spec = PhantomSpec { seed, ..spec.clone() };
        let ph = phantom::generate(&spec)?;
        let mut frames = ph.frames;
        let mut labels = ph.labels;
        if spec.misalignment_mm > 0.0 {
            let mseed = stage_seed(cfg.seed, "misalignment");
            seeds.insert("misalignment".into(), mseed);
            let (f, l, shifts) = phantom::inject_misalignment(&labels, &frames, spec.misalignment_mm, mseed)?;
            frames = f;
            labels = l;
            let mut csv = String::from("slice,dx_vox,dy_vox\n");
            for s in shifts {
                let _ = writeln!(csv, "{},{},{}", s.slice, s.dx_vox, s.dy_vox);
            }
            art.text("injected_shifts.csv", "injected_shifts_csv", None, &csv)?;
        }
        Ok(Source {
            frames,
            labels,
            truth: Some(ph.fields),
        })
    } else {
        let input = cfg.input.as_ref().expect("validated");
        let frames = input.frames.iter().map(|p| mhd::read_image(p)).collect::<Result<Vec<_>>>()?;
        let labels = input.labels.iter().map(|p| mhd::read_labels(p)).collect::<Result<Vec<_>>>()?;
        Ok(Source {
            frames: FrameSequence::new(frames)?,
            labels,
            truth: None,
        })
    }
}

/// Per-frame products of the propagation stage.
struct FrameProducts {
    surface: SurfaceMesh,
    direct: tetmesh::PropagatedVolume,
    warped: lbwarp::Warped,
    truth_surface: SurfaceMesh,
    surface_metrics: FrameMetrics,
    node_metrics: FrameMetrics,
    clamped: usize,
}

fn surface_metrics(surface: &SurfaceMesh, truth_surface: &SurfaceMesh, truth: &LabelVolume, t: usize) -> Result<FrameMetrics> {
    let vox = metrics::voxelize(surface, truth.grid, label::MYOCARDIUM)?;
    Ok(FrameMetrics {
        frame: t,
        dice: Some(metrics::dice(&vox, truth, label::MYOCARDIUM)?),
        mad: Some(metrics::mad(surface, truth_surface)?),
        hausdorff: Some(metrics::hausdorff(surface, truth_surface)?),
        ..Default::default()
    })
}

fn quality_row(s: &mut String, method: &str, t: usize, q: &QualityReport, clamped: usize) {
    let _ = writeln!(
        s,
        "{method},{t},{},{:.9},{:.9},{:.9},{},{:.9},{:.9},{clamped}",
        q.scaled_jacobian.len(),
        q.min_scaled_jacobian,
        q.mean_scaled_jacobian,
        q.fraction_acceptable,
        q.nonpositive,
        q.mean_radius_edge,
        q.max_volume
    );
}

/// Runs every stage and writes all artifacts under `out_dir`. Invariant
/// violations are reported after the manifest is written.
pub fn run(cfg: &PipelineConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut art = Artifacts {
        root: out_dir.to_path_buf(),
        entries: Vec::new(),
    };
    let mut seeds = BTreeMap::new();
    let mut timings = Vec::new();
    let mut violations: Vec<String> = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let src = stage("source", load_source(cfg, &mut seeds, &mut art))?;
    let n = src.frames.len();
    lap("source", &mut timings);

    let (frames, labels) = if cfg.align.enabled {
        let (f, l, shifts) = stage("align", align::correct(&src.frames, &src.labels, ReferenceAxis::MedianEndDiastole))?;
        art.text("align_shifts.csv", "align_shifts_csv", None, &align::shifts_csv(&shifts))?;
        (f, l)
    } else {
        (src.frames, src.labels)
    };
    if cfg.output.write_volumes {
        for t in 0..n {
            art.mhd(&format!("volumes/frame_t{t}.mhd"), "frame", Some(t), |p| mhd::write_image(frames.frame(t), p))?;
            art.mhd(&format!("volumes/labels_t{t}.mhd"), "labels", Some(t), |p| mhd::write_labels(&labels[t], p))?;
        }
    }
    lap("align", &mut timings);

    // Registration: one field per frame mapping end-diastole into frame t.
    let mut ed_fields: BTreeMap<Pairing, Vec<DisplacementField>> = BTreeMap::new();
    let mut loss_csv = String::from("pairing,frame,level,iteration,total,similarity,smooth\n");
    let mut error_csv = String::from("pairing,frame,mean_endpoint_error_mm\n");
    let myo: Vec<bool> = labels[0].data.iter().map(|&l| l == label::MYOCARDIUM).collect();
    for &pairing in &[Pairing::FixedReference, Pairing::Sequential] {
        if !cfg.pairing_enabled(pairing) {
            continue;
        }
        let name = pairing_name(pairing);
        let seed = stage_seed(cfg.seed, &format!("register/{name}"));
        seeds.insert(format!("register/{name}"), seed);
        let rc = RegistrationConfig {
            seed,
            ..cfg.registration.clone()
        };
        let outcomes: Vec<RegistrationOutcome> = register::register_sequence(&frames, &rc, pairing)?;
        for (k, o) in outcomes.iter().enumerate() {
            for l in &o.log {
                let _ = writeln!(
                    loss_csv,
                    "{name},{},{},{},{:.12e},{:.12e},{:.12e}",
                    k + 1,
                    l.level,
                    l.iteration,
                    l.total,
                    l.similarity,
                    l.smooth
                );
            }
        }
        let raw: Vec<DisplacementField> = outcomes.into_iter().map(|o| o.field).collect();
        let fields = match pairing {
            Pairing::FixedReference => raw,
            Pairing::Sequential => register::accumulate_sequential(&raw),
        };
        let mut all = vec![DisplacementField::zeros(*frames.grid())];
        all.extend(fields);
        if let Some(truth) = &src.truth {
            for t in 1..n {
                let e = all[t].mean_endpoint_error(&truth[t], Some(&myo))?;
                let _ = writeln!(error_csv, "{name},{t},{e:.9}");
            }
        }
        if cfg.output.write_fields {
            for (t, f) in all.iter().enumerate().skip(1) {
                art.mhd(&format!("fields/{name}_t{t}.mhd"), "field", Some(t), |p| f.write(p))?;
            }
        }
        ed_fields.insert(pairing, all);
    }
    art.text("registration_loss.csv", "registration_loss_csv", None, &loss_csv)?;
    if src.truth.is_some() {
        art.text("registration_error.csv", "registration_error_csv", None, &error_csv)?;
    }
    lap("register", &mut timings);

    // End-diastole meshes.
    let sz = cfg.mesh.resample_z_mm.unwrap_or(labels[0].grid.spacing[0]);
    let mesh_labels = |l: &LabelVolume| -> Result<LabelVolume> {
        if (l.grid.spacing[2] - sz).abs() > 1e-12 {
            l.resample_z(sz)
        } else {
            Ok(l.clone())
        }
    };
    let ed_labels = stage("resample", mesh_labels(&labels[0]))?;
    let full = stage("marching_cubes", marching_cubes(&ed_labels, label::MYOCARDIUM, cfg.mesh.iso_policy))?;
    art.text("ed/surface_full.vtk", "surface_full", Some(0), &io::surface_to_vtk(&full))?;
    let ed_surface = decimate(&full, cfg.mesh.target_vertices);
    if let Err(e) = ed_surface.validate() {
        violations.push(format!("decimated end-diastole surface: {e}"));
    }
    art.text("ed/surface.vtk", "surface_ed", Some(0), &io::surface_to_vtk(&ed_surface))?;
    lap("surface", &mut timings);

    let ed_tets = stage("tetrahedralize", tetmesh::tetrahedralize(&ed_surface, cfg.mesh.max_volume))?;
    if let Err(e) = ed_tets.validate() {
        violations.push(format!("end-diastole tet mesh: {e}"));
    }
    let ed_quality = tetmesh::assess(&ed_tets);
    if !ed_quality.valid {
        violations.push(format!("end-diastole tet mesh has {} non-positive elements", ed_quality.nonpositive));
    }
    art.text("ed/tetmesh.vtk", "tetmesh_ed", Some(0), &io::tets_to_vtk(&ed_tets, Some(&ed_quality)))?;
    let weights = stage("lbwarp_weights", lbwarp::compute_weights(&ed_tets))?;
    lap("tetrahedralize", &mut timings);

    // Per-frame propagation, warping and metrics.
    let fixed = &ed_fields[&Pairing::FixedReference];
    let products: Vec<FrameProducts> = (0..n)
        .into_par_iter()
        .map(|t| -> Result<FrameProducts> {
            let wrap = |stage: &'static str| move |e: Error| e.in_stage(stage, Some(t));
            let prop = propagate_surface(&ed_surface, &fixed[t], t);
            let direct = tetmesh::propagate_volume(&ed_tets, &fixed[t], t);
            let warped = lbwarp::warp(&ed_tets, &weights, &prop.mesh, t).map_err(wrap("lbwarp"))?;
            let truth_labels = mesh_labels(&labels[t]).map_err(wrap("resample"))?;
            let truth_surface =
                marching_cubes(&truth_labels, label::MYOCARDIUM, cfg.mesh.iso_policy).map_err(wrap("marching_cubes"))?;
            let surface_metrics = surface_metrics(&prop.mesh, &truth_surface, &labels[t], t).map_err(wrap("metrics"))?;
            let nd = metrics::node_distance_meshes(&direct.mesh, &warped.mesh).map_err(wrap("metrics"))?;
            Ok(FrameProducts {
                clamped: prop.clamped,
                surface: prop.mesh,
                direct,
                warped,
                truth_surface,
                surface_metrics,
                node_metrics: FrameMetrics {
                    frame: t,
                    node_mean: Some(nd.mean),
                    node_max: Some(nd.max),
                    ..Default::default()
                },
            })
        })
        .collect::<Result<_>>()?;
    lap("propagate", &mut timings);

    let mut quality_csv = String::from(
        "method,frame,elements,min_scaled_jacobian,mean_scaled_jacobian,fraction_acceptable,nonpositive,mean_radius_edge,max_volume,clamped\n",
    );
    let mut warp_csv = String::from("frame,solver,iterations_x,iterations_y,iterations_z,residual_x,residual_y,residual_z\n");
    for (t, p) in products.iter().enumerate() {
        art.text(&format!("surfaces/fixed_reference_t{t}.vtk"), "surface", Some(t), &io::surface_to_vtk(&p.surface))?;
        if cfg.output.write_ply {
            art.text(&format!("surfaces/fixed_reference_t{t}.ply"), "surface_ply", Some(t), &io::surface_to_ply(&p.surface))?;
        }
        art.text(&format!("truth/surface_t{t}.vtk"), "surface_truth", Some(t), &io::surface_to_vtk(&p.truth_surface))?;
        art.text(
            &format!("tets/direct_t{t}.vtk"),
            "tetmesh_direct",
            Some(t),
            &io::tets_to_vtk(&p.direct.mesh, Some(&p.direct.quality)),
        )?;
        art.text(
            &format!("tets/lbwarp_t{t}.vtk"),
            "tetmesh_lbwarp",
            Some(t),
            &io::tets_to_vtk(&p.warped.mesh, Some(&p.warped.quality)),
        )?;
        quality_row(&mut quality_csv, "direct", t, &p.direct.quality, p.direct.clamped);
        quality_row(&mut quality_csv, "lbwarp", t, &p.warped.quality, p.clamped);
        let [ix, iy, iz] = p.warped.iterations;
        let [rx, ry, rz] = p.warped.residual;
        let _ = writeln!(warp_csv, "{t},{:?},{ix},{iy},{iz},{rx:.3e},{ry:.3e},{rz:.3e}", p.warped.solver);
        for (s, &v) in p.warped.mesh.boundary_map.iter().enumerate() {
            if p.warped.mesh.vertices[v] != p.surface.vertices[s] {
                violations.push(format!("frame {t}: warped boundary vertex {s} is off its target"));
                break;
            }
        }
        if p.warped.residual.iter().any(|&r| !(r < lbwarp::TOLERANCE)) {
            violations.push(format!("frame {t}: warp residual {:?} above tolerance", p.warped.residual));
        }
    }
    art.text("quality.csv", "quality_csv", None, &quality_csv)?;
    art.text("lbwarp.csv", "lbwarp_csv", None, &warp_csv)?;

    let fixed_report = MetricsReport::new(products.iter().map(|p| p.surface_metrics.clone()).collect());
    let node_report = MetricsReport::new(products.iter().map(|p| p.node_metrics.clone()).collect());
    let mut comparisons = vec![
        Comparison {
            name: "fixed_reference_vs_truth".into(),
            candidate: "fixed_reference".into(),
            reference: "ground_truth_masks".into(),
            report: fixed_report,
        },
        Comparison {
            name: "direct_vs_lbwarp".into(),
            candidate: "lbwarp".into(),
            reference: "direct".into(),
            report: node_report,
        },
    ];

    let mut mad_ttest = None;
    if let Some(seq) = ed_fields.get(&Pairing::Sequential) {
        let seq_metrics: Vec<FrameMetrics> = (0..n)
            .into_par_iter()
            .map(|t| -> Result<(SurfaceMesh, FrameMetrics)> {
                let s = propagate_surface(&ed_surface, &seq[t], t).mesh;
                let truth = &products[t].truth_surface;
                let m = surface_metrics(&s, truth, &labels[t], t).map_err(|e| e.in_stage("metrics", Some(t)))?;
                Ok((s, m))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .enumerate()
            .map(|(t, (s, m))| {
                art.text(&format!("surfaces/sequential_t{t}.vtk"), "surface_sequential", Some(t), &io::surface_to_vtk(&s))
                    .map(|_| m)
            })
            .collect::<Result<_>>()?;
        let series = |r: &[FrameMetrics]| -> Vec<f64> { r.iter().skip(1).filter_map(|m| m.mad).collect() };
        let a = series(&comparisons[0].report.frames);
        let b = series(&seq_metrics);
        if a.len() >= 2 {
            mad_ttest = Some(metrics::ttest(&a, &b)?);
        }
        comparisons.insert(
            1,
            Comparison {
                name: "sequential_vs_truth".into(),
                candidate: "sequential".into(),
                reference: "ground_truth_masks".into(),
                report: MetricsReport::new(seq_metrics),
            },
        );
    }
    for c in &mut comparisons {
        if let Err(e) = c.report.validate() {
            violations.push(format!("{}: {e}", c.name));
        }
        c.report.ttest = if c.candidate == "sequential" { mad_ttest } else { None };
        art.text(&format!("metrics_{}.csv", c.name), "metrics_csv", None, &c.report.to_csv())?;
    }
    let metrics_file = MetricsFile { comparisons, mad_ttest };
    art.text(METRICS_JSON, "metrics_json", None, &serde_json::to_string_pretty(&metrics_file)?)?;
    lap("metrics", &mut timings);

    let manifest = Manifest {
        tool: "lvmesh".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        root_seed: cfg.seed,
        stage_seeds: seeds,
        config: PipelineConfig {
            output_dir: None,
            ..cfg.clone()
        },
        n_frames: n,
        files: art.entries,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&manifest_path, e))?;

    if !violations.is_empty() {
        return Err(Error::Invariant(violations.join("; ")));
    }
    Ok(RunOutcome {
        manifest_path,
        manifest,
        metrics: metrics_file,
        timings,
    })
}

/// Loads a manifest and checks that every listed file exists with the
/// recorded checksum.
pub fn verify_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::MissingArtifact {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    for e in &manifest.files {
        let p = root.join(&e.path);
        if !p.is_file() {
            return Err(Error::MissingArtifact {
                path: p,
                reason: format!("{} listed in the manifest does not exist", e.kind),
            });
        }
        let sum = sha256_file(&p)?;
        if sum != e.sha256 {
            return Err(Error::MissingArtifact {
                path: p,
                reason: format!("checksum {sum} differs from manifest {}", e.sha256),
            });
        }
    }
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub mad_mean: Option<f64>,
    pub mad_std: Option<f64>,
    pub node_mean: Option<f64>,
    pub node_max: Option<f64>,
    /// Significance tier of the MAD difference against the fixed-reference
    /// row, when both pairings ran.
    pub tier: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSeries {
    pub name: String,
    pub metric: String,
    /// `(frame, value)` for frames after end-diastole.
    pub values: Vec<(usize, f64)>,
}

/// Summary tables derived from a run's manifest; statistics cover frames
/// after end-diastole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub rows: Vec<ComparisonRow>,
    pub series: Vec<FrameSeries>,
}

fn summarize(vals: Vec<f64>) -> (Option<f64>, Option<f64>) {
    match metrics::Summary::of(&vals) {
        Some(s) => (Some(s.mean), Some(s.std)),
        None => (None, None),
    }
}

pub fn report(manifest_path: &Path) -> Result<ReportTables> {
    let manifest = verify_manifest(manifest_path)?;
    let entry = manifest.files_of_kind("metrics_json").next().ok_or_else(|| Error::MissingArtifact {
        path: manifest_path.to_path_buf(),
        reason: "manifest lists no metrics JSON".into(),
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let path = root.join(&entry.path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: MetricsFile = serde_json::from_str(&text)?;

    let mut rows = Vec::new();
    let mut series = Vec::new();
    for c in &file.comparisons {
        let later: Vec<&FrameMetrics> = c.report.frames.iter().filter(|f| f.frame > 0).collect();
        let pick = |f: fn(&FrameMetrics) -> Option<f64>| -> Vec<f64> { later.iter().filter_map(|m| f(m)).collect() };
        let (dice_mean, dice_std) = summarize(pick(|m| m.dice));
        let (mad_mean, mad_std) = summarize(pick(|m| m.mad));
        let (node_mean, _) = summarize(pick(|m| m.node_mean));
        let node_max = pick(|m| m.node_max).into_iter().reduce(f64::max);
        rows.push(ComparisonRow {
            name: c.name.clone(),
            dice_mean,
            dice_std,
            mad_mean,
            mad_std,
            node_mean,
            node_max,
            tier: c.report.ttest.map(|t| t.tier.symbol().to_string()),
        });
        for (metric, f) in [("mad_mm", (|m: &FrameMetrics| m.mad) as fn(&FrameMetrics) -> Option<f64>), ("node_mean_mm", |m| m.node_mean)] {
            let values: Vec<(usize, f64)> = later.iter().filter_map(|m| f(m).map(|v| (m.frame, v))).collect();
            if !values.is_empty() {
                series.push(FrameSeries {
                    name: c.name.clone(),
                    metric: metric.into(),
                    values,
                });
            }
        }
    }
    Ok(ReportTables { rows, series })
}

fn cell(v: Option<f64>, scale: f64, prec: usize) -> String {
    v.map(|x| format!("{:.*}", prec, x * scale)).unwrap_or_else(|| "-".into())
}

impl ReportTables {
    /// Fixed-width text: one row per comparison, then the per-frame series.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<26} {:>16} {:>16} {:>10} {:>10} {:>4}\n",
            "comparison", "Dice (%)", "MAD (mm)", "node (mm)", "node max", "sig"
        );
        for r in &self.rows {
            let pm = |m: Option<f64>, sd: Option<f64>, scale: f64| match (m, sd) {
                (Some(m), Some(sd)) => format!("{:.2} ± {:.2}", m * scale, sd * scale),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:<26} {:>16} {:>16} {:>10} {:>10} {:>4}",
                r.name,
                pm(r.dice_mean, r.dice_std, 100.0),
                pm(r.mad_mean, r.mad_std, 1.0),
                cell(r.node_mean, 1.0, 3),
                cell(r.node_max, 1.0, 3),
                r.tier.as_deref().unwrap_or("")
            );
        }
        for fs in &self.series {
            let _ = writeln!(s, "\n{} {} per frame:", fs.name, fs.metric);
            for (t, v) in &fs.values {
                let _ = writeln!(s, "  t={t:<3} {v:.4}");
            }
        }
        s
    }

    /// `comparison,dice_mean,dice_std,mad_mean,mad_std,node_mean,node_max,sig`.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("comparison,dice_mean,dice_std,mad_mean,mad_std,node_mean,node_max,sig\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name,
                cell(r.dice_mean, 1.0, 9),
                cell(r.dice_std, 1.0, 9),
                cell(r.mad_mean, 1.0, 9),
                cell(r.mad_std, 1.0, 9),
                cell(r.node_mean, 1.0, 9),
                cell(r.node_max, 1.0, 9),
                r.tier.as_deref().unwrap_or("")
            );
        }
        s
    }

    /// `comparison,metric,frame,value`.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("comparison,metric,frame,value\n");
        for fs in &self.series {
            for (t, v) in &fs.values {
                let _ = writeln!(s, "{},{},{t},{v:.9}", fs.name, fs.metric);
            }
        }
        s
    }
}
