//! End-to-end runs of the installed binary: synth -> flow -> eval, exit
//! codes, dotted overrides and output determinism.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sceneflow"))
}

fn run_synth(dir: &Path) {
    let status = bin()
        .args(["synth", "--scene", "S1", "--frames", "2", "--output-dir"])
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("color0001.png").exists());
    assert!(dir.join("depth0002.png").exists());
    assert!(dir.join("intrinsics.txt").exists());
    assert!(dir.join("gt_flow0002.flo").exists());
    assert!(dir.join("gt_flow3d.sf3d").exists());
}

fn run_flow(scene: &Path, out: &Path) {
    let output = bin()
        .args(["flow", "--input"])
        .arg(scene)
        .args(["--intrinsics"])
        .arg(scene.join("intrinsics.txt"))
        .args(["--output-dir"])
        .arg(out)
        .args(["--viz", "--trace"])
        .args(["--segmentation.min_size", "50"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "flow failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("flow0002.flo").exists());
    assert!(out.join("flow3d.sf3d").exists());
    assert!(out.join("flow0002.png").exists());
    assert!(out.join("trace.csv").exists());
}

#[test]
fn synth_flow_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let out = tmp.path().join("out");
    run_synth(&scene);
    run_flow(&scene, &out);

    let output = bin()
        .args(["eval", "--flow"])
        .arg(out.join("flow0002.flo"))
        .args(["--gt"])
        .arg(scene.join("gt_flow0002.flo"))
        .args(["--map"])
        .arg(out.join("epe.png"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    let mean: f64 = stdout
        .trim()
        .strip_prefix("mean EPE ")
        .expect("eval prints mean EPE")
        .parse()
        .unwrap();
    // Through 16-bit image quantization the recovered flow stays well
    // below the noisy-case acceptance bound.
    assert!(mean < 0.5, "mean EPE {mean}");
    assert!(out.join("epe.png").exists());
}

#[test]
fn eval_identical_files_reports_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    run_synth(&scene);
    let output = bin()
        .args(["eval", "--flow"])
        .arg(scene.join("gt_flow0002.flo"))
        .args(["--gt"])
        .arg(scene.join("gt_flow0002.flo"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.trim(), "mean EPE 0.000000");
}

#[test]
fn viz_writes_image() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    run_synth(&scene);
    let out = tmp.path().join("flow.png");
    let status = bin()
        .args(["viz", "--flow"])
        .arg(scene.join("gt_flow0002.flo"))
        .args(["--output"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.exists());
}

#[test]
fn exit_codes() {
    // Unknown subcommand: usage error.
    let status = bin().arg("frobnicate").status().unwrap();
    assert_eq!(status.code(), Some(1));
    // Help exits cleanly.
    let status = bin().arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
    // Unknown config override: usage error.
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    run_synth(&scene);
    let status = bin()
        .args(["flow", "--input"])
        .arg(&scene)
        .args(["--intrinsics"])
        .arg(scene.join("intrinsics.txt"))
        .args(["--output-dir"])
        .arg(tmp.path().join("out"))
        .args(["--solver.not_a_field", "3"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
    // Missing input directory: data error.
    let status = bin()
        .args([
            "eval",
            "--flow",
            "/nonexistent.flo",
            "--gt",
            "/nonexistent.flo",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // Unknown scene name: usage error.
    let status = bin()
        .args(["synth", "--scene", "S9", "--output-dir"])
        .arg(tmp.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn segment_subcommand_writes_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let status = bin()
        .args(["synth", "--scene", "S3", "--output-dir"])
        .arg(&scene)
        .status()
        .unwrap();
    assert!(status.success());
    let labels = tmp.path().join("labels.png");
    let output = bin()
        .args(["segment", "--input"])
        .arg(&scene)
        .args(["--intrinsics"])
        .arg(scene.join("intrinsics.txt"))
        .args(["--output"])
        .arg(&labels)
        .args(["--segmentation.min_size=50"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(labels.exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("segments: 6"), "stdout: {stdout}");
}

#[test]
fn identical_inputs_give_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    run_synth(&scene);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    run_flow(&scene, &out_a);
    run_flow(&scene, &out_b);
    for name in ["flow0002.flo", "flow3d.sf3d"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}
