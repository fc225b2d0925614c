use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const DEFAULT: &str = include_str!("../configs/ou_default.toml");

fn qpsde(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpsde"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn verdict(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("verdict.json")).unwrap()).unwrap()
}

#[test]
fn validate_passes_on_the_bundled_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = qpsde(&["validate"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = verdict(dir.path());
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["passed"], true);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("effective_config.toml").exists());
}

#[test]
fn validate_reports_a_witness_for_expanding_drift() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, DEFAULT.replace("a = [[1.0]]", "a = [[-1.0]]").replace("alpha = 1.0", "alpha = -1.0")).unwrap();
    let out = qpsde(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v = verdict(dir.path());
    assert_eq!(v["passed"], false);
    let dis = &v["details"]["dissipativity"];
    assert!(dis["alpha_hat"].as_f64().unwrap() < 0.0);
    assert!(dis["worst"]["x"].is_array());
    assert!(String::from_utf8_lossy(&out.stderr).contains("witness"));
}

#[test]
fn config_errors_name_the_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, DEFAULT.replace("pullback_tol = 1e-6", "pulback_tol = 1e-6")).unwrap();
    let out = qpsde(&["pullback", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let v = verdict(dir.path());
    let err = v["error"].as_str().unwrap();
    assert!(err.contains("run") && err.contains("line 29"), "{err}");
}

#[test]
fn pullback_is_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["pullback", "--set", "pullback.n_paths=3", "--set", "run.seed=11"];
    assert_eq!(qpsde(&args, a.path()).status.code(), Some(0));
    assert_eq!(qpsde(&["pullback", "--set", "run.threads=1", "--set", "pullback.n_paths=3", "--set", "run.seed=11"], b.path()).status.code(), Some(0));
    for name in ["pullback.csv", "levels_11.csv", "levels_13.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let csv = std::fs::read_to_string(a.path().join("levels_11.csv")).unwrap();
    assert!(csv.starts_with("s_k,gap_k\n"));
}

#[test]
fn overrides_are_echoed_into_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = qpsde(&["oracle", "--set", "oracle.hull_grid=4", "--set", "run.seed=5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let effective = std::fs::read_to_string(dir.path().join("effective_config.toml")).unwrap();
    let table: toml::Table = effective.parse().unwrap();
    assert_eq!(table["oracle"]["hull_grid"].as_integer(), Some(4));
    assert_eq!(table["run"]["seed"].as_integer(), Some(5));
    let rows = std::fs::read_to_string(dir.path().join("oracle_rho_tilde.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 16);
}

#[test]
fn acceptance_subset_lists_each_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = qpsde(&["acceptance", "--only", "1,9"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = verdict(dir.path());
    let ids: Vec<u64> = v["details"]["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![1, 9]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn unknown_task_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = qpsde(&["bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fokker-planck"));
}
