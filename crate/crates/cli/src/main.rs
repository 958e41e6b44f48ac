use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lvmesh::align::{self, ReferenceAxis};
use lvmesh::io;
use lvmesh::isosurface::{self, IsoPolicy, DEFAULT_TARGET_VERTICES};
use lvmesh::lbwarp;
use lvmesh::metrics::{self, FrameMetrics, MetricsReport};
use lvmesh::phantom::{self, PhantomSpec};
use lvmesh::pipeline::{self, PipelineConfig};
use lvmesh::register::{self, Backend, DisplacementField, Pairing, RegistrationConfig};
use lvmesh::tetmesh::{self, QualityReport, DEFAULT_MAX_VOLUME};
use lvmesh::volume::{label, mhd, FrameSequence};

#[derive(Parser)]
#[command(name = "lvmesh", version, about = "Dynamic left-ventricle meshes from cine image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Dense,
    Ffd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    FixedReference,
    Sequential,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Smoothed,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic beating-LV sequence with analytic motion.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with phantom parameters; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, num_args = 3)]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-slice in-plane misalignment amplitude (mm).
        #[arg(long)]
        misalignment: Option<f64>,
    },
    /// Removes per-slice in-plane shifts using LV blood-pool centroids.
    Align {
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimates displacement fields, for one pair or a whole sequence.
    Register {
        #[arg(long, conflicts_with = "frames", requires = "moving")]
        fixed: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        /// Whole sequence, end-diastole first.
        #[arg(long, num_args = 2..)]
        frames: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "fixed-reference")]
        pairing: PairingArg,
        #[arg(long, value_enum, default_value = "dense")]
        backend: BackendArg,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Field file for a pair, directory for a sequence.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Myocardial surface from a label volume.
    Isosurface {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = label::MYOCARDIUM)]
        label: u8,
        #[arg(long, value_enum, default_value = "smoothed")]
        policy: PolicyArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Quadric-error simplification to a vertex budget.
    Decimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_VERTICES)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Tetrahedral mesh of a closed surface.
    Tetmesh {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_VOLUME)]
        max_volume: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Moves surface vertices along a displacement field.
    PropagateSurface {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Moves every tet vertex along a displacement field.
    PropagateVolume {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warps a tet mesh onto per-frame boundary surfaces.
    Lbwarp {
        #[arg(long)]
        mesh: PathBuf,
        /// Target surfaces in frame order, starting at frame 1.
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Element quality of a tet mesh.
    Quality {
        #[arg(long)]
        input: PathBuf,
        /// Per-element CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compares surfaces, masks and corresponding meshes.
    Metrics {
        #[arg(long, requires = "reference")]
        surface: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, requires = "labels_b")]
        labels_a: Option<PathBuf>,
        #[arg(long)]
        labels_b: Option<PathBuf>,
        #[arg(long, default_value_t = label::MYOCARDIUM)]
        label: u8,
        #[arg(long, requires = "tets_b")]
        tets_a: Option<PathBuf>,
        #[arg(long)]
        tets_b: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Runs the whole workflow from a TOML config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary tables from a pipeline manifest.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for `report_rows.csv` and `report_series.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_quality(q: &QualityReport) {
    println!(
        "elements {}  min SJ {:.4}  mean SJ {:.4}  SJ>=0.2 {:.1}%  non-positive {}  mean radius-edge {:.3}  max volume {:.3} mm3",
        q.scaled_jacobian.len(),
        q.min_scaled_jacobian,
        q.mean_scaled_jacobian,
        100.0 * q.fraction_acceptable,
        q.nonpositive,
        q.mean_radius_edge,
        q.max_volume
    );
}

fn cmd_phantom(
    out: &Path,
    config: Option<&Path>,
    dims: Option<Vec<usize>>,
    frames: Option<usize>,
    seed: Option<u64>,
    misalignment: Option<f64>,
) -> Result<()> {
    let mut spec = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<PhantomSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(d) = dims {
        spec.dims = [d[0], d[1], d[2]];
    }
    if let Some(n) = frames {
        spec.n_frames = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(m) = misalignment {
        spec.misalignment_mm = m;
    }
    let ph = phantom::generate(&spec)?;
    let (seq, labels, shifts) = if spec.misalignment_mm > 0.0 {
        phantom::inject_misalignment(&ph.labels, &ph.frames, spec.misalignment_mm, spec.seed)?
    } else {
        (ph.frames.clone(), ph.labels.clone(), Vec::new())
    };
    mkdir(out)?;
    let mut frame_files = Vec::new();
    let mut label_files = Vec::new();
    let mut field_files = Vec::new();
    for t in 0..spec.n_frames {
        let (f, l, u) = (format!("frame_t{t}.mhd"), format!("labels_t{t}.mhd"), format!("truth_field_t{t}.mhd"));
        mhd::write_image(seq.frame(t), &out.join(&f))?;
        mhd::write_labels(&labels[t], &out.join(&l))?;
        ph.fields[t].write(&out.join(&u))?;
        frame_files.push(f);
        label_files.push(l);
        field_files.push(u);
    }
    let manifest = serde_json::json!({
        "spec": spec,
        "shifts": shifts,
        "frames": frame_files,
        "labels": label_files,
        "fields": field_files,
    });
    write(&out.join("phantom.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} frames to {}", spec.n_frames, out.display());
    Ok(())
}

fn cmd_align(frames: &[PathBuf], labels: &[PathBuf], out: &Path) -> Result<()> {
    let imgs = frames.iter().map(|p| mhd::read_image(p)).collect::<lvmesh::Result<Vec<_>>>()?;
    let masks = labels.iter().map(|p| mhd::read_labels(p)).collect::<lvmesh::Result<Vec<_>>>()?;
    let (seq, masks, shifts) = align::correct(&FrameSequence::new(imgs)?, &masks, ReferenceAxis::MedianEndDiastole)?;
    mkdir(out)?;
    for t in 0..seq.len() {
        mhd::write_image(seq.frame(t), &out.join(format!("frame_t{t}.mhd")))?;
        mhd::write_labels(&masks[t], &out.join(format!("labels_t{t}.mhd")))?;
    }
    write(&out.join("shifts.csv"), &align::shifts_csv(&shifts))?;
    let moved = shifts.iter().filter(|s| s.dx_vox != 0 || s.dy_vox != 0).count();
    println!("{moved} of {} slices shifted", shifts.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_register(
    fixed: Option<&Path>,
    moving: Option<&Path>,
    frames: &[PathBuf],
    pairing: PairingArg,
    backend: BackendArg,
    lambda: Option<f64>,
    iterations: Option<usize>,
    seed: u64,
    out: &Path,
    loss_log: Option<&Path>,
) -> Result<()> {
    let backend = match backend {
        BackendArg::Dense => Backend::Dense,
        BackendArg::Ffd => Backend::Ffd,
    };
    let mut config = RegistrationConfig {
        backend,
        iterations,
        seed,
        ..Default::default()
    };
    if let Some(l) = lambda {
        config.lambda = l;
    }
    config.validate()?;
    let mut log = String::new();
    match (fixed, moving) {
        (Some(f), Some(m)) => {
            let out_reg = register::register(&mhd::read_image(f)?, &mhd::read_image(m)?, &config)?;
            out_reg.field.write(out)?;
            log = register::loss_log_csv(&out_reg.log);
            println!("max displacement {:.3} mm", out_reg.field.max_norm());
        }
        _ => {
            if frames.len() < 2 {
                bail!("give --fixed and --moving, or at least two --frames");
            }
            let imgs = frames.iter().map(|p| mhd::read_image(p)).collect::<lvmesh::Result<Vec<_>>>()?;
            let pairing = match pairing {
                PairingArg::FixedReference => Pairing::FixedReference,
                PairingArg::Sequential => Pairing::Sequential,
            };
            let outcomes = register::register_sequence(&FrameSequence::new(imgs)?, &config, pairing)?;
            mkdir(out)?;
            log.push_str("frame,level,iteration,total,similarity,smooth\n");
            for (k, o) in outcomes.iter().enumerate() {
                let t = k + 1;
                o.field.write(&out.join(format!("field_t{t}.mhd")))?;
                for line in register::loss_log_csv(&o.log).lines().skip(1) {
                    let _ = writeln!(log, "{t},{line}");
                }
            }
            if pairing == Pairing::Sequential {
                let fields: Vec<DisplacementField> = outcomes.into_iter().map(|o| o.field).collect();
                for (k, f) in register::accumulate_sequential(&fields).iter().enumerate() {
                    f.write(&out.join(format!("accumulated_t{}.mhd", k + 1)))?;
                }
            }
            println!("wrote {} fields to {}", frames.len() - 1, out.display());
        }
    }
    if let Some(p) = loss_log {
        write(p, &log)?;
    }
    Ok(())
}

fn cmd_metrics(
    surface: Option<&Path>,
    reference: Option<&Path>,
    labels: Option<(&Path, &Path)>,
    label_value: u8,
    tets: Option<(&Path, &Path)>,
    frame: usize,
    csv: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    if surface.is_none() && labels.is_none() && tets.is_none() {
        bail!("nothing to compare: give --surface/--reference, --labels-a/--labels-b or --tets-a/--tets-b");
    }
    let mut m = FrameMetrics {
        frame,
        ..Default::default()
    };
    if let (Some(a), Some(b)) = (surface, reference) {
        let (a, b) = (io::read_surface_vtk(a)?, io::read_surface_vtk(b)?);
        m.mad = Some(metrics::mad(&a, &b)?);
        m.hausdorff = Some(metrics::hausdorff(&a, &b)?);
    }
    if let Some((a, b)) = labels {
        m.dice = Some(metrics::dice(&mhd::read_labels(a)?, &mhd::read_labels(b)?, label_value)?);
    }
    if let Some((a, b)) = tets {
        let d = metrics::node_distance_meshes(&io::read_tets_vtk(a)?, &io::read_tets_vtk(b)?)?;
        m.node_mean = Some(d.mean);
        m.node_max = Some(d.max);
    }
    let report = MetricsReport::new(vec![m]);
    print!("{}", report.to_csv());
    if let Some(p) = csv {
        write(p, &report.to_csv())?;
    }
    if let Some(p) = json {
        write(p, &report.to_json()?)?;
    }
    Ok(())
}

fn cmd_lbwarp(mesh: &Path, targets: &[PathBuf], out: &Path) -> Result<()> {
    let ed = io::read_tets_vtk(mesh)?;
    let weights = lbwarp::compute_weights(&ed)?;
    mkdir(out)?;
    let mut csv = String::from("frame,solver,min_scaled_jacobian,mean_scaled_jacobian,nonpositive,residual_max\n");
    for (k, p) in targets.iter().enumerate() {
        let t = k + 1;
        let target = io::read_surface_vtk(p)?;
        let w = lbwarp::warp(&ed, &weights, &target, t).with_context(|| format!("warping onto {}", p.display()))?;
        io::write_tets_vtk(&w.mesh, Some(&w.quality), &out.join(format!("lbwarp_t{t}.vtk")))?;
        let _ = writeln!(
            csv,
            "{t},{:?},{:.9},{:.9},{},{:.3e}",
            w.solver,
            w.quality.min_scaled_jacobian,
            w.quality.mean_scaled_jacobian,
            w.quality.nonpositive,
            w.residual.iter().copied().fold(0.0, f64::max)
        );
    }
    write(&out.join("quality.csv"), &csv)?;
    println!("warped {} frames into {}", targets.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            config,
            dims,
            frames,
            seed,
            misalignment,
        } => cmd_phantom(&out, config.as_deref(), dims, frames, seed, misalignment),
        Command::Align { frames, labels, out } => cmd_align(&frames, &labels, &out),
        Command::Register {
            fixed,
            moving,
            frames,
            pairing,
            backend,
            lambda,
            iterations,
            seed,
            out,
            loss_log,
        } => cmd_register(
            fixed.as_deref(),
            moving.as_deref(),
            &frames,
            pairing,
            backend,
            lambda,
            iterations,
            seed,
            &out,
            loss_log.as_deref(),
        ),
        Command::Isosurface {
            labels,
            label,
            policy,
            out,
            ply,
        } => {
            let policy = match policy {
                PolicyArg::Smoothed => IsoPolicy::Smoothed,
                PolicyArg::Binary => IsoPolicy::Binary,
            };
            let m = isosurface::marching_cubes(&mhd::read_labels(&labels)?, label, policy)?;
            io::write_surface_vtk(&m, &out)?;
            if let Some(p) = ply {
                io::write_surface_ply(&m, &p)?;
            }
            println!(
                "{} vertices, {} triangles, genus {}, volume {:.1} mm3",
                m.vertex_count(),
                m.triangles.len(),
                m.genus(),
                m.signed_volume()
            );
            Ok(())
        }
        Command::Decimate { input, target, out, ply } => {
            let m = io::read_surface_vtk(&input)?;
            m.validate()?;
            let d = isosurface::decimate(&m, target);
            io::write_surface_vtk(&d, &out)?;
            if let Some(p) = ply {
                io::write_surface_ply(&d, &p)?;
            }
            println!("{} -> {} vertices", m.vertex_count(), d.vertex_count());
            Ok(())
        }
        Command::Tetmesh { input, max_volume, out } => {
            let s = io::read_surface_vtk(&input)?;
            let tm = tetmesh::tetrahedralize(&s, max_volume)?;
            let q = tetmesh::assess(&tm);
            io::write_tets_vtk(&tm, Some(&q), &out)?;
            print_quality(&q);
            Ok(())
        }
        Command::PropagateSurface { input, field, frame, out } => {
            let p = isosurface::propagate_surface(&io::read_surface_vtk(&input)?, &DisplacementField::read(&field)?, frame);
            io::write_surface_vtk(&p.mesh, &out)?;
            if p.clamped > 0 {
                eprintln!("warning: {} vertices fell outside the field grid and were clamped", p.clamped);
            }
            Ok(())
        }
        Command::PropagateVolume { input, field, frame, out } => {
            let p = tetmesh::propagate_volume(&io::read_tets_vtk(&input)?, &DisplacementField::read(&field)?, frame);
            io::write_tets_vtk(&p.mesh, Some(&p.quality), &out)?;
            print_quality(&p.quality);
            if p.clamped > 0 {
                eprintln!("warning: {} vertices fell outside the field grid and were clamped", p.clamped);
            }
            Ok(())
        }
        Command::Lbwarp { mesh, targets, out } => cmd_lbwarp(&mesh, &targets, &out),
        Command::Quality { input, csv } => {
            let q = tetmesh::assess(&io::read_tets_vtk(&input)?);
            print_quality(&q);
            if let Some(p) = csv {
                let mut s = String::from("element,scaled_jacobian,radius_edge\n");
                for (i, (sj, re)) in q.scaled_jacobian.iter().zip(&q.radius_edge).enumerate() {
                    let _ = writeln!(s, "{i},{sj:.9},{re:.9}");
                }
                write(&p, &s)?;
            }
            Ok(())
        }
        Command::Metrics {
            surface,
            reference,
            labels_a,
            labels_b,
            label,
            tets_a,
            tets_b,
            frame,
            csv,
            json,
        } => cmd_metrics(
            surface.as_deref(),
            reference.as_deref(),
            labels_a.as_deref().zip(labels_b.as_deref()),
            label,
            tets_a.as_deref().zip(tets_b.as_deref()),
            frame,
            csv.as_deref(),
            json.as_deref(),
        ),
        Command::Pipeline { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| config.parent().unwrap_or(Path::new(".")).join("lvmesh_out"));
            let outcome = pipeline::run(&cfg, &out)?;
            for (stage, secs) in &outcome.timings {
                eprintln!("{stage:<16} {secs:8.1} s");
            }
            println!("manifest: {}", outcome.manifest_path.display());
            Ok(())
        }
        Command::Report { manifest, csv } => {
            let tables = pipeline::report(&manifest)?;
            print!("{}", tables.to_text());
            if let Some(dir) = csv {
                mkdir(&dir)?;
                write(&dir.join("report_rows.csv"), &tables.rows_csv())?;
                write(&dir.join("report_series.csv"), &tables.series_csv())?;
            }
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
