//! End-to-end runs of the pipeline on a small phantom.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lvmesh::pipeline::{self, PipelineConfig, RunOutcome};
use lvmesh::Error;

const CONFIG: &str = r#"
seed = 11
pairings = ["fixed_reference", "sequential"]

[phantom]
dims = [48, 48, 48]
n_frames = 6

[registration]
iterations = 30

[mesh]
target_vertices = 1500
"#;

struct Run {
    _dir: tempfile::TempDir,
    out: PathBuf,
    outcome: RunOutcome,
}

fn smoke() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = PipelineConfig::from_toml_str(CONFIG).unwrap();
        let outcome = pipeline::run(&cfg, &out).unwrap();
        Run { _dir: dir, out, outcome }
    })
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dest = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_tree(&e.path(), &dest);
        } else {
            std::fs::copy(e.path(), dest).unwrap();
        }
    }
}

#[test]
fn manifest_lists_every_mesh_and_report() {
    let r = smoke();
    let m = &r.outcome.manifest;
    assert_eq!(m.n_frames, 6);
    assert_eq!(m.files_of_kind("surface").count(), 6);
    assert_eq!(m.files_of_kind("tetmesh_direct").count() + m.files_of_kind("tetmesh_lbwarp").count(), 12);
    assert_eq!(m.files_of_kind("metrics_csv").count(), 3);
    assert_eq!(m.files_of_kind("metrics_json").count(), 1);
    let verified = pipeline::verify_manifest(&r.outcome.manifest_path).unwrap();
    assert_eq!(&verified, m);
    for key in ["phantom", "register/fixed_reference", "register/sequential"] {
        assert!(m.stage_seeds.contains_key(key), "{key}");
    }
}

#[test]
fn report_has_one_row_per_comparison() {
    let r = smoke();
    let tables = pipeline::report(&r.outcome.manifest_path).unwrap();
    let names: Vec<&str> = tables.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["fixed_reference_vs_truth", "sequential_vs_truth", "direct_vs_lbwarp"]);
    let mad: Vec<_> = tables.series.iter().filter(|s| s.metric == "mad_mm").collect();
    assert_eq!(mad.len(), 2);
    for s in mad {
        assert_eq!(s.values.len(), 5);
        assert_eq!(s.values[0].0, 1);
    }
    assert!(tables.rows[1].tier.is_some());
    let text = tables.to_text();
    assert!(text.contains("fixed_reference_vs_truth"));
    assert_eq!(tables.rows_csv().lines().count(), 4);
}

#[test]
fn rerun_is_byte_identical() {
    let r = smoke();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_toml_str(CONFIG).unwrap();
    let again = pipeline::run(&cfg, dir.path()).unwrap();
    assert_eq!(again.manifest.files, r.outcome.manifest.files);
    let a = std::fs::read(r.out.join("manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("manifest.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn deleted_mesh_is_a_missing_artifact() {
    let r = smoke();
    let dir = tempfile::tempdir().unwrap();
    copy_tree(&r.out, dir.path());
    let victim = r.outcome.manifest.files_of_kind("tetmesh_lbwarp").nth(2).unwrap();
    std::fs::remove_file(dir.path().join(&victim.path)).unwrap();
    match pipeline::report(&dir.path().join("manifest.json")) {
        Err(Error::MissingArtifact { path, .. }) => assert!(path.ends_with(&victim.path)),
        other => panic!("expected a missing artifact, got {other:?}"),
    }
}

#[test]
fn negative_lambda_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[registration]\nlambda = -1.0\n").unwrap();
    assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
    let cfg = PipelineConfig {
        registration: lvmesh::register::RegistrationConfig {
            lambda: -1.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = dir.path().join("never");
    assert!(matches!(pipeline::run(&cfg, &out), Err(Error::Config(_))));
    assert!(!out.exists());
}
