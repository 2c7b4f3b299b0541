use std::path::Path;
use std::process::{Command, Output};

use camkit::io;

fn camkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camkit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn camkit")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = camkit(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_run(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--seed", "4", "--per-class", "6", "--size", "32"]);
    ok(dir, &["train", "--data", "data", "--out", "net.ckpt", "--seed", "1", "--epochs", "1"]);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = camkit(dir.path(), &["eval", "--data", "data", "--report", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}

#[test]
fn unknown_method_and_mode_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    for (flag, value) in [("--method", "gradcam"), ("--mode", "loose")] {
        let out = camkit(dir.path(), &["eval", "--ckpt", "net.ckpt", "--data", "data", "--report", "r.csv", flag, value]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains(value));
    }
}

#[test]
fn unreadable_checkpoint_reports_format_error() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path());
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = camkit(dir.path(), &["eval", "--ckpt", "bad.ckpt", "--data", "data", "--report", "r.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn gradcheck_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--instances", "3", "--seed", "2"]);
    assert!(stdout.contains("conv2d"));
}

#[test]
fn outputs_are_readable_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let data = io::load_dataset(&d.join("data")).unwrap();
    assert_eq!(data.train.len() + data.test.len(), 30);
    let net = io::load_checkpoint(&d.join("net.ckpt")).unwrap();
    assert_eq!(net.input_shape(), [1, 32, 32]);

    ok(d, &["cam", "--ckpt", "net.ckpt", "--data", "data", "--index", "1", "--class", "2", "--out-png", "c.png", "--out-tensor", "c.camt"]);
    let cam = io::load_tensor(&d.join("c.camt")).unwrap();
    assert_eq!(cam.shape(), &[16, 16]);
    let png = std::fs::read(d.join("c.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    ok(d, &["localize", "--ckpt", "net.ckpt", "--data", "data", "--mode", "heuristic", "--out-csv", "b.csv"]);
    let rows = io::parse_boxes(&std::fs::read_to_string(d.join("b.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5 * data.test.len());
    assert!(rows.iter().all(|r| r.bbox.fits(32, 32)));

    ok(d, &["eval", "--ckpt", "net.ckpt", "--data", "data", "--report", "r.csv"]);
    let report = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);

    ok(d, &["features", "--ckpt", "net.ckpt", "--data", "data", "--relabel", "0,0,1,1,2", "--out", "h.camh"]);
    let head = io::load_head(&d.join("h.camh")).unwrap();
    assert_eq!(head.classes(), 3);

    ok(d, &["units", "--ckpt", "net.ckpt", "--class", "0", "--data", "data", "--out", "units"]);
    assert!(d.join("units/class0_units.png").exists());
    let csv = std::fs::read_to_string(d.join("units/class0_units.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}
