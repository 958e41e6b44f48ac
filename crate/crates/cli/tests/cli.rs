use std::path::Path;
use std::process::{Command, Output};

fn lvmesh(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvmesh"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lvmesh(dir, args);
    assert!(
        out.status.success(),
        "lvmesh {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn meshing_chain_on_a_phantom() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom", "--out", "ph", "--dims", "48", "48", "48", "--frames", "3", "--misalignment", "2"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ph/phantom.json")).unwrap()).unwrap();
    assert_eq!(manifest["fields"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["shifts"].as_array().unwrap().len(), 48);

    ok(
        d,
        &[
            "align", "--frames", "ph/frame_t0.mhd", "ph/frame_t1.mhd", "ph/frame_t2.mhd", "--labels", "ph/labels_t0.mhd",
            "ph/labels_t1.mhd", "ph/labels_t2.mhd", "--out", "aligned",
        ],
    );
    assert!(std::fs::read_to_string(d.join("aligned/shifts.csv")).unwrap().starts_with("frame,slice,dx_vox,dy_vox\n"));

    let iso = ok(d, &["isosurface", "--labels", "aligned/labels_t0.mhd", "--out", "ed.vtk", "--ply", "ed.ply"]);
    assert!(iso.contains("genus 0"), "{iso}");
    ok(d, &["decimate", "--input", "ed.vtk", "--target", "1200", "--out", "ed_dec.vtk"]);
    let tm = ok(d, &["tetmesh", "--input", "ed_dec.vtk", "--out", "ed_tet.vtk"]);
    assert!(tm.contains("non-positive 0"), "{tm}");
    ok(d, &["quality", "--input", "ed_tet.vtk", "--csv", "q.csv"]);
    assert!(std::fs::read_to_string(d.join("q.csv")).unwrap().starts_with("element,scaled_jacobian,radius_edge\n"));

    // The truth fields live on the unaligned grid; the phantom was shifted
    // per slice, so use the unshifted copy for propagation checks.
    ok(d, &["phantom", "--out", "clean", "--dims", "48", "48", "48", "--frames", "3"]);
    ok(d, &["isosurface", "--labels", "clean/labels_t0.mhd", "--out", "c0.vtk"]);
    ok(d, &["decimate", "--input", "c0.vtk", "--target", "1200", "--out", "c0d.vtk"]);
    ok(d, &["tetmesh", "--input", "c0d.vtk", "--out", "c0t.vtk"]);
    for t in ["1", "2"] {
        let field = format!("clean/truth_field_t{t}.mhd");
        ok(d, &["propagate-surface", "--input", "c0d.vtk", "--field", &field, "--frame", t, "--out", &format!("s{t}.vtk")]);
        ok(d, &["propagate-volume", "--input", "c0t.vtk", "--field", &field, "--frame", t, "--out", &format!("v{t}.vtk")]);
    }
    ok(d, &["lbwarp", "--mesh", "c0t.vtk", "--targets", "s1.vtk", "s2.vtk", "--out", "warp"]);
    assert_eq!(std::fs::read_to_string(d.join("warp/quality.csv")).unwrap().lines().count(), 3);

    ok(d, &["isosurface", "--labels", "clean/labels_t2.mhd", "--out", "truth2.vtk"]);
    let m = ok(
        d,
        &[
            "metrics", "--surface", "s2.vtk", "--reference", "truth2.vtk", "--tets-a", "v2.vtk", "--tets-b", "warp/lbwarp_t2.vtk",
            "--frame", "2", "--json", "m.json",
        ],
    );
    let mad: f64 = m.lines().find(|l| l.starts_with("2,mad_mm,")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(mad < 1.0, "{m}");
    let node: f64 = m.lines().find(|l| l.starts_with("2,node_mean_mm,")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(node < 2.0, "{m}");
    assert!(d.join("m.json").is_file());
}

#[test]
fn register_pair_and_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom", "--out", "ph", "--dims", "48", "48", "48", "--frames", "3"]);
    ok(
        d,
        &[
            "register", "--fixed", "ph/frame_t0.mhd", "--moving", "ph/frame_t1.mhd", "--backend", "ffd", "--iterations", "20",
            "--out", "f1.mhd", "--loss-log", "loss.csv",
        ],
    );
    assert!(d.join("f1.mhd").is_file() && d.join("f1.raw").is_file());
    assert_eq!(std::fs::read_to_string(d.join("loss.csv")).unwrap().lines().count(), 1 + 3 * 20);
    ok(
        d,
        &[
            "register", "--frames", "ph/frame_t0.mhd", "ph/frame_t1.mhd", "ph/frame_t2.mhd", "--pairing", "sequential",
            "--backend", "ffd", "--iterations", "10", "--out", "seq",
        ],
    );
    for f in ["field_t1.mhd", "field_t2.mhd", "accumulated_t1.mhd", "accumulated_t2.mhd"] {
        assert!(d.join("seq").join(f).is_file(), "{f}");
    }
    let bad = lvmesh(d, &["register", "--fixed", "ph/frame_t0.mhd", "--moving", "ph/frame_t1.mhd", "--lambda", "-1", "--out", "x.mhd"]);
    assert!(!bad.status.success());
}

#[test]
fn pipeline_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("run.toml"),
        "output_dir = \"out\"\n[phantom]\ndims = [48, 48, 48]\nn_frames = 3\n[registration]\nbackend = \"ffd\"\niterations = 40\n",
    )
    .unwrap();
    ok(d, &["pipeline", "--config", "run.toml"]);
    assert!(d.join("out/manifest.json").is_file());
    let text = ok(d, &["report", "--manifest", "out/manifest.json", "--csv", "rep"]);
    assert!(text.contains("fixed_reference_vs_truth") && text.contains("direct_vs_lbwarp"), "{text}");
    assert_eq!(std::fs::read_to_string(d.join("rep/report_rows.csv")).unwrap().lines().count(), 3);

    std::fs::write(d.join("bad.toml"), "[registration]\nlambda = -1.0\n").unwrap();
    let bad = lvmesh(d, &["pipeline", "--config", "bad.toml", "--out", "never"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lambda"));
    assert!(!d.join("never").exists());

    std::fs::remove_file(d.join("out/tets/lbwarp_t1.vtk")).unwrap();
    let missing = lvmesh(d, &["report", "--manifest", "out/manifest.json"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing artifact"));
}
