use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oedkit"))
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn without_timings(mut v: Value) -> String {
    v.as_object_mut().unwrap().remove("timings");
    serde_json::to_string(&v).unwrap()
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = example("ad_16.cfg");
    let o = run(&["linear-oed", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success());
    assert!(!out.exists());
    let echoed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(echoed["design"]["budget"], 5);
    // defaults are materialized
    assert_eq!(echoed["design"]["optimizer"]["max_iter"], 300);
}

#[test]
fn linear_oed_example_beats_empty_design_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ad");
    let cfg = example("ad_16.cfg");
    let args = ["linear-oed", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    assert!(run(&args).status.success());
    let first = report(&out);
    let design = std::fs::read(out.join("design.csv")).unwrap();
    assert!(run(&["--threads", "1", args[0], args[1], args[2], args[3], args[4]]).status.success());
    let second = report(&out);
    assert_eq!(without_timings(first.clone()), without_timings(second));
    assert_eq!(design, std::fs::read(out.join("design.csv")).unwrap());

    let c = &first["criterion"];
    assert!(c["phi_final"].as_f64().unwrap() < c["phi_empty"].as_f64().unwrap());
    assert_eq!(first["selected"].as_array().unwrap().len(), 5);
    assert!(first["timings"].is_object());
    assert_eq!(first["config"]["seed"], 20240611);
    for f in ["design.csv", "map.csv", "variance.csv", "truth.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(out.join("map.csv")).unwrap();
    assert!(header.starts_with("ix,iy,x,y,value\n"));
    assert_eq!(header.lines().count(), 257);
}

#[test]
fn greedy_sequence_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = example("ad_16.cfg");
    let o = run(&["greedy", "--config", cfg.to_str().unwrap(), "--k", "5", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(tmp.path());
    assert_eq!(r["monotone"], true);
    let values: Vec<f64> = r["greedy"]["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(values.len(), 5);
    assert!(values.windows(2).all(|p| p[1] <= p[0]));
}

#[test]
fn verify_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(report(tmp.path())["status"], "ok");
}

#[test]
fn nonlinear_selects_four_times() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = example("seird_times.cfg");
    let o = run(&["nonlinear-oed", "--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(tmp.path());
    assert_eq!(r["selected_times"].as_array().unwrap().len(), 4);
    assert_eq!(r["greedy"]["values"].as_array().unwrap().len(), 4);
    assert_eq!(r["monotone"], true);
    assert!(r["criterion"]["final"]["mean"].as_f64().unwrap() > 0.0);
    assert!(tmp.path().join("trajectory.csv").exists());
}

#[test]
fn export_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    assert!(run(&["export-field", "--field", "prior-sample", "--out-dir", dir, "--seed", "3"]).status.success());
    let a = std::fs::read(tmp.path().join("prior_sample.csv")).unwrap();
    assert!(run(&["export-field", "--field", "prior-sample", "--out-dir", dir, "--seed", "3"]).status.success());
    assert_eq!(a, std::fs::read(tmp.path().join("prior_sample.csv")).unwrap());
    let o = run(&["export-field", "--field", "trajectory", "--out-dir", dir]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("x");
    let d = dir.to_str().unwrap();
    assert_eq!(run(&["linear-oed", "--set", "design.gama=1", "--out-dir", d]).status.code(), Some(1));
    assert_eq!(run(&["linear-oed", "--config", "/nonexistent.cfg"]).status.code(), Some(1));
    assert_eq!(run(&["greedy", "--out-dir", d]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    let cfg = example("ad_16.cfg");
    let o = run(&[
        "linear-oed",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        d,
        "--set",
        "problem.advection_diffusion.solver.max_iter=1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(report(&dir)["status"], "failed");
}
