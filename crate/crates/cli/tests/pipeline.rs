//! End-to-end pipeline tests against the real binary.

use std::path::Path;
use std::process::Command;

use agentmix::synth::SynthSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agentmix"))
}

fn write_spec(path: &Path) {
    let spec = SynthSpec::planted(2, 10, 3, &[0.5, 0.3, 0.2], 0.1, 400, 11);
    agentmix::io::save_synth_spec(path, &spec).unwrap();
}

fn run_pipeline(dir: &Path, seed: &str) {
    let spec_path = dir.join("spec.json");
    write_spec(&spec_path);

    let status = bin()
        .args(["simulate", "--config"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir.join("series.csv"))
        .arg("--truth")
        .arg(dir.join("truth.jsonl"))
        .status()
        .unwrap();
    assert!(status.success(), "simulate failed");

    let status = bin()
        .args(["infer", "--series"])
        .arg(dir.join("series.csv"))
        .arg("--out")
        .arg(dir.join("rundir"))
        .args([
            "--runs", "5", "--subset-size", "4", "--memory", "2", "--horizon", "10", "--window",
            "30", "--seed", seed,
        ])
        .status()
        .unwrap();
    assert!(status.success(), "infer failed");

    let status = bin()
        .args(["report", "--rundir"])
        .arg(dir.join("rundir"))
        .arg("--out")
        .arg(dir.join("report.csv"))
        .status()
        .unwrap();
    assert!(status.success(), "report failed");
}

#[test]
fn smoke_pipeline_produces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), "3");
    assert!(dir.path().join("series.csv").is_file());
    assert!(dir.path().join("truth.jsonl").is_file());
    assert!(dir.path().join("rundir/summary.csv").is_file());
    assert!(dir.path().join("rundir/meta.json").is_file());
    assert!(dir.path().join("rundir/run_0000.jsonl.gz").is_file());
    assert!(dir.path().join("report.csv").is_file());
    assert!(dir.path().join("report.json").is_file());

    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("k,l,l_hat,l_tilde,var,band\n"));
}

#[test]
fn identical_seeds_give_byte_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), "7");
    run_pipeline(b.path(), "7");
    for file in ["rundir/summary.csv", "report.csv", "report.json", "rundir/run_0003.jsonl.gz"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical-seed invocations");
    }
}

#[test]
fn zero_runs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["infer", "--series", "missing.csv", "--out"])
        .arg(dir.path().join("rundir"))
        .args(["--runs", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("0"), "stderr should mention the bad value: {stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["infer", "--nonsense"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn missing_series_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["infer", "--series"])
        .arg(dir.path().join("nope.csv"))
        .arg("--out")
        .arg(dir.path().join("rundir"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
