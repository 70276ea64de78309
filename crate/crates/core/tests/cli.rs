mod common;

use std::path::Path;
use std::process::{Command, Output};

fn fedras(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedras"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_config(dir: &Path) -> String {
    let data = dir.join("u.data");
    common::write_synthetic_log(&data, 40, 3);
    let out = dir.join("out");
    write_config(
        dir,
        &format!(
            "seed = 5\noutput_dir = {out:?}\n[dataset]\npath = {data:?}\n\
             [fed]\nrounds = 4\nclient_fraction = 0.25\n[comm]\ncr = 0.9\n"
        ),
    )
}

#[test]
fn missing_dataset_path_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\n[fed]\nrounds = 3\n");
    let out = fedras(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dataset.path"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[train]\nlearning_rate = 0.1\n");
    let out = fedras(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_one_csv_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = fedras(&["run", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("round,hr10,ndcg10,down_bytes,up_bytes,groups_used"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",fedras")));

    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["best_hr"].as_f64().unwrap() >= 0.0);
    assert!(dir.path().join("out/checkpoint.bin").exists());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = fedras(&["run", "--config", &config, "--rounds", "2", "--method", "none"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().ends_with(",none"));
}

#[test]
fn checkpoint_evaluation_matches_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    assert!(fedras(&["run", "--config", &config]).status.success());
    let ck = dir.path().join("out/checkpoint.bin");
    let out = fedras(&["eval-checkpoint", "--config", &config, "--checkpoint", ck.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let hr: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(eval["hr_at_k"].as_f64().unwrap(), hr);
}

#[test]
fn empty_sweep_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = fedras(&["sweep", "--config", &config, "--crs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_runs_repeated_rates_once() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = fedras(&["sweep", "--config", &config, "--crs", "0.9,0.8,0.9", "--rounds", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/sweep_summary.json")).unwrap()).unwrap();
    let rates: Vec<f64> = table.as_array().unwrap().iter().map(|r| r["cr"].as_f64().unwrap()).collect();
    assert_eq!(rates, vec![0.9, 0.8]);
    assert!(dir.path().join("out/cr_0.9/metrics.csv").exists());
    assert!(dir.path().join("out/cr_0.8/metrics.csv").exists());
}

#[test]
fn shipped_config_resolves() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ml100k.toml");
    let cfg = fedras::config::RawConfig::from_file(path).unwrap().resolve().unwrap();
    assert_eq!(cfg.fed.rounds, 500);
    assert_eq!(cfg.fed.train, fedras::model::TrainConfig::default());
}
