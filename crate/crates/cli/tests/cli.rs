use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcl"))
        .args(args)
        .env("DCL_THREADS", "1")
        .output()
        .expect("spawn dcl")
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "expected one error record, got {stderr}");
    serde_json::from_str(lines[0]).expect("error record is JSON")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn small_gauss(dir: &Path) -> Vec<String> {
    vec![
        "--set".into(),
        "preset=gauss-3".into(),
        "--set".into(),
        "data.n=300".into(),
        "--set".into(),
        "cluster_epochs=3".into(),
        "--set".into(),
        "cluster_batch=100".into(),
        "--set".into(),
        "cluster_hidden=8".into(),
        "--out".into(),
        dir.display().to_string(),
    ]
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcl(&[
        "cluster",
        "--set",
        "no_such_key=1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    assert!(rec["error"]["message"]
        .as_str()
        .unwrap()
        .contains("no_such_key"));
}

#[test]
fn bad_usage_and_bad_threads_exit_with_a_record() {
    let out = dcl(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "usage");

    let out = Command::new(env!("CARGO_BIN_EXE_dcl"))
        .args(["grad-check"])
        .env("DCL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "config");
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = dcl(&[
        "evaluate",
        "--out",
        d,
        "--set",
        "input.assignments=/nonexistent/a.dclb",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "io");
}

#[test]
fn synth_data_writes_n_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let s = stdout_json(&dcl(&[
        "synth-data",
        "--set",
        "preset=gauss-3",
        "--set",
        "data.n=120",
        "--out",
        d,
    ]));
    assert_eq!(s["result"]["rows"], 120);
    let f = dcl::data::read_features(&dir.path().join("features.dcfm")).unwrap();
    assert_eq!(f.rows(), 120);
    assert_eq!(
        dcl::data::read_labels(&dir.path().join("labels.dclb"))
            .unwrap()
            .len(),
        120
    );
    let echo = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    assert!(echo.contains("preset=gauss-3"));
    assert!(echo.contains("data.n=120"));
}

#[test]
fn evaluate_perfect_assignments_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let labels = [0, 1, 2, 2, 1, 0, 0];
    let relabelled: Vec<usize> = labels.iter().map(|&l| (l + 1) % 3).collect();
    dcl::data::write_labels(&dir.path().join("truth.dclb"), &labels).unwrap();
    dcl::data::write_labels(&dir.path().join("pred.dclb"), &relabelled).unwrap();
    let d = dir.path().to_str().unwrap();
    let s = stdout_json(&dcl(&[
        "evaluate",
        "--out",
        d,
        "--set",
        &format!("input.labels={d}/truth.dclb"),
        "--set",
        &format!("input.assignments={d}/pred.dclb"),
    ]));
    assert_eq!(s["result"]["acc"], 1.0);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["acc"], 1.0);
}

#[test]
fn config_file_and_overrides_take_precedence_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\ndata.n = 90\ngauss.k=4\n").unwrap();
    let d = dir.path().to_str().unwrap();
    let s = stdout_json(&dcl(&[
        "synth-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "preset=gauss-3",
        "--set",
        "data.n=60",
        "--out",
        d,
    ]));
    assert_eq!(s["result"]["rows"], 60);
    let labels = dcl::data::read_labels(&dir.path().join("labels.dclb")).unwrap();
    assert_eq!(labels.iter().max(), Some(&3));
}

#[test]
fn gauss_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let mut args = vec!["pipeline".to_string(), "--seed".into(), "11".into()];
        args.extend(small_gauss(dir.path()));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        stdout_json(&dcl(&args));
    }
    for name in [
        "cluster_log.jsonl",
        "eval_report.json",
        "assignments.dclb",
        "features.dcfm",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn staged_commands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth-data".to_string()];
    args.extend(small_gauss(dir.path()));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    stdout_json(&dcl(&argv));
    args[0] = "cluster".into();
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let s = stdout_json(&dcl(&argv));
    assert_eq!(s["result"]["epochs"], 3);
    args[0] = "evaluate".into();
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let s = stdout_json(&dcl(&argv));
    let acc = s["result"]["acc"].as_f64().unwrap();
    assert!((1.0 / 3.0..=1.0).contains(&acc));
}
