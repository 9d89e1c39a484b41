use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn spde_lab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spde-lab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, value: Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path.display().to_string()
}

fn small() -> Value {
    json!({
        "operator": {"dim": 4},
        "experiment": {"paths": 64, "horizon": 0.25, "dt": 0.015625, "export_paths": 2}
    })
}

#[test]
fn negative_horizon_is_a_config_error_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg["experiment"]["horizon"] = json!(-1.0);
    let path = write_config(dir.path(), cfg);
    let out = spde_lab(&["simulate", "--config", &path, "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment.horizon"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), json!({"experiment": {"pathz": 3}}));
    let out = spde_lab(&["simulate", "--config", &path, "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pathz"));
}

#[test]
fn environment_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), small());
    let out = Command::new(env!("CARGO_BIN_EXE_spde-lab"))
        .args(["print-config", "--config", &path])
        .env("SPDE_LAB__experiment__paths", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["experiment"]["paths"], 77);
    assert_eq!(cfg["operator"]["dim"], 4);
}

#[test]
fn solve_u_without_singular_drift_is_zero_after_one_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), small());
    let out = spde_lab(&["solve-u", "--config", &path, "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sol: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/solution.json")).unwrap()).unwrap();
    assert_eq!(sol["iterations"], 1);
    let mut values = csv::Reader::from_path(dir.path().join("run/u.csv")).unwrap();
    let headers = values.headers().unwrap().clone();
    let u_columns: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.starts_with('u')).map(|(i, _)| i).collect();
    assert!(!u_columns.is_empty());
    for row in values.records() {
        let row = row.unwrap();
        assert!(u_columns.iter().all(|&i| row[i].parse::<f64>().unwrap() == 0.0));
    }
}

#[test]
fn replay_reproduces_and_locates_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), small());
    let out = spde_lab(&["simulate", "--config", &path, "--out", "run", "--seed", "9"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest_path = dir.path().join("run/manifest.json");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["outputs"][0]["file"], "params.json");
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let out = spde_lab(&["replay", "run/manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("identical"));

    let mut edited = manifest.clone();
    edited["config"]["seed"] = json!(10);
    fs::write(&manifest_path, edited.to_string()).unwrap();
    let out = spde_lab(&["replay", "run/manifest.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("first divergence: path_0000.csv"));

    let mut edited = manifest.clone();
    edited["config"]["experiment"]["paths"] = json!(65);
    fs::write(&manifest_path, edited.to_string()).unwrap();
    let out = spde_lab(&["replay", "run/manifest.json"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout.contains("first divergence: params.json"), "{stdout}");
    assert!(stdout.contains("experiment.paths: 64 -> 65"), "{stdout}");

    let mut edited = manifest;
    edited["version"] = json!("0.0.0-old");
    fs::write(&manifest_path, edited.to_string()).unwrap();
    assert_eq!(spde_lab(&["replay", "run/manifest.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn verify_all_on_the_gaussian_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(
        dir.path(),
        json!({
            "operator": {"dim": 4},
            "experiment": {
                "paths": 2000,
                "dt": 0.0009765625,
                "test_function": {"kind": "coordinate", "mode": 0}
            }
        }),
    );
    let out = spde_lab(&["verify-all", "--config", &path, "--out", "run"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("4 Gaussian oracle comparisons"), "{stdout}");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["passed"], true);
    assert!(dir.path().join("run/summary.csv").exists());
}
