use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn orl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const LR_RUN: &str = r#"{
    "task": "LrOnline", "seed": 1, "trim": 0.3,
    "gen": {"model": "Lr", "p": 5, "sigma_e": 1.0, "sigma_o": 10.0, "n": 1000, "lambda": 0.2, "seed": 0},
    "schedule": {"batches": 10, "placement": {"kind": "UniformShuffle"}},
    "algorithms": ["OrlMedianFilter", "NonRobustBaseline"]
}"#;

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr.json", LR_RUN);
    let out = dir.path().join("out");
    let res = orl(&[
        "--quiet",
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "lambda,algorithm,repeat,step,error"
    );
    assert_eq!(trace.lines().count(), 1 + 10 + 10);
    assert!(out.join("summary.json").exists());
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr.json", LR_RUN);
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        assert!(orl(&[
            "--quiet",
            "run",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .success());
        fs::read(out.join("trace.csv")).unwrap()
    };
    assert_eq!(run("4", "a"), run("4", "b"));
    assert_ne!(run("4", "a"), run("5", "c"));
}

#[test]
fn gen_writes_container_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr.json", LR_RUN);
    let out = dir.path().join("data");
    assert!(
        orl(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let bytes = fs::read(out.join("dataset.orld")).unwrap();
    assert_eq!(&bytes[..4], b"ORLD");
    let csv = fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x0,x1,x2,x3,x4,y,inlier");
    assert_eq!(csv.lines().count(), 1001);
}

#[test]
fn drl_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "drl.json",
        r#"{
            "task": "PcaDistributed", "seed": 2, "trim": 0.2,
            "gen": {"model": "Pca", "p": 6, "d": 2, "sigma_e": 1.0, "sigma_o": 10.0, "n": 2000, "lambda": 0.1, "seed": 0},
            "schedule": {"batches": 5, "placement": {"kind": "UniformShuffle"}},
            "algorithms": ["OrlMedianFilter", "OnlineAverage"],
            "fault": {"kind": {"kind": "Latency", "stop_when_done_fraction": 0.6}}
        }"#,
    );
    let out = dir.path().join("drl");
    let res = orl(&["drl", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let reports: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    // `run` refuses a distributed task.
    assert_eq!(
        orl(&[
            "--quiet",
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn median_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.json",
        r#"{"task": "MedianBench", "points": [[0.0, 0.0], [2.0, 0.0], [1.0, 5.0], [1.0, -5.0], [1.0, 0.0]]}"#,
    );
    let res = orl(&["--quiet", "median", "--config", &cfg]);
    assert!(res.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let m = summary["median"].as_array().unwrap();
    assert!((m[0].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(m[1].as_f64().unwrap().abs() < 1e-6);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"task": "LrOnline", "oops": 1}"#);
    assert_eq!(
        orl(&["--quiet", "run", "--config", &bad, "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    let missing = dir.path().join("nope.json");
    assert_eq!(
        orl(&["--quiet", "run", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
    let cfg = write_config(dir.path(), "lr.json", LR_RUN);
    // No output directory anywhere.
    assert_eq!(
        orl(&["--quiet", "run", "--config", &cfg]).status.code(),
        Some(2)
    );
}
