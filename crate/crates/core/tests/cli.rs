//! End-to-end smoke tests of the `sbi` binary.

use std::path::Path;
use std::process::Command;

fn sbi_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbi"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("experiment.json");
    let out_dir = dir.join("artifacts");
    let cfg = serde_json::json!({
        "simulator": "gaussian_linear",
        "estimator": "npe-mdn",
        "method": "map",
        "budget": 16,
        "seed": 0,
        "epochs": 3,
        "n_test": 8,
        "mc_samples": 1,
        "out_dir": out_dir,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let out = sbi_cmd().args(["generate", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote"));

    // rerunning without --force refuses to clobber
    let out = sbi_cmd().args(["generate", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pass --force"));

    let out = sbi_cmd().args(["generate", "--force", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());

    let out = sbi_cmd().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = sbi_cmd()
        .args(["evaluate", "--posterior-grid", "0", "--decompose", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("coverage AUC"), "unexpected output: {stdout}");

    let artifacts = dir.path().join("artifacts");
    assert!(artifacts.join("results/results.csv").exists());
    assert!(artifacts
        .join("results/postgrid_gaussian_linear_npe-mdn_map_T1_b16_s0_x0.csv")
        .exists());
    assert!(artifacts
        .join("results/uncertainty_gaussian_linear_npe-mdn_map_T1_b16_s0.json")
        .exists());
}

#[test]
fn sweep_command_writes_results_and_medians() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.json");
    let out_dir = dir.path().join("artifacts");
    let cfg = serde_json::json!({
        "simulator": "gaussian_linear",
        "estimator": "npe-mdn",
        "budgets": [8, 16],
        "methods": [{"method": "map"}],
        "seeds": [0, 1],
        "epochs": 2,
        "n_test": 6,
        "mc_samples": 1,
        "out_dir": out_dir,
    });
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = sbi_cmd()
        .args(["sweep", "--jobs", "1", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results =
        std::fs::read_to_string(dir.path().join("artifacts/results/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 5); // header + 2 budgets × 2 seeds
    assert!(dir.path().join("artifacts/results/medians.csv").exists());
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"simulator":"two_moons","unknown_field":1}"#).unwrap();
    let out = sbi_cmd().args(["generate", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn env_var_sets_artifact_root() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experiment.json");
    let cfg = serde_json::json!({
        "simulator": "two_moons",
        "estimator": "npe-mdn",
        "method": "map",
        "budget": 8,
        "seed": 2,
        "epochs": 1,
        "n_test": 4,
    });
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let root = dir.path().join("env-root");
    let out = sbi_cmd()
        .env("SBI_DATA_DIR", &root)
        .args(["generate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("datasets/two_moons_train_b8_s2.csv").exists());
}
