use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use erfcond_core::backbone::{audit_parameters, build_backbone, BackboneConfig};
use erfcond_core::harness::{ExperimentConfig, SyntheticPreset};

fn erfcond(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erfcond"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn core_fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

fn tiny_config(dir: &Path, empty_domain: bool) -> PathBuf {
    let mut config = ExperimentConfig::toy(3, &[SyntheticPreset::Straight, SyntheticPreset::Curved]);
    config.training.iterations = 2;
    config.training.batch_size = 2;
    let mut json = serde_json::to_value(&config).unwrap();
    for d in json["domains"].as_array_mut().unwrap() {
        d["train"]["frames"] = 4.into();
        d["test"]["frames"] = 2.into();
    }
    if empty_domain {
        json["domains"][1]["train"]["frames"] = 0.into();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    path
}

#[test]
fn audit_params_prints_the_library_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = erfcond(&["audit-params", "--format", "csv", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let graph = build_backbone(&BackboneConfig::erf_modified()).unwrap().graph;
    let expected = audit_parameters(&graph).to_csv();
    assert_eq!(stdout(&out), expected);
    assert_eq!(std::fs::read_to_string(dir.path().join("params.csv")).unwrap(), expected);
}

#[test]
fn synth_gen_output_passes_parse_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = erfcond(&["synth-gen", "--preset", "curved", "--frames", "3", "--seed", "9", "--out", d]);
    assert!(out.status.success(), "{}", stderr(&out));
    let list = dir.path().join("list.txt");
    assert_eq!(std::fs::read_to_string(&list).unwrap().lines().count(), 3);
    let out = erfcond(&["parse-check", "--dataset", "culane", list.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("3 frames,"), "{}", stdout(&out));
}

#[test]
fn parse_check_reads_fixtures_and_rejects_malformed_files() {
    let out = erfcond(&["parse-check", "--dataset", "tusimple", core_fixture("tusimple/label_data.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "2 frames, 3 lanes, 9 points");

    let out = erfcond(&["parse-check", "--dataset", "tusimple", core_fixture("malformed/length_mismatch.json").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("length_mismatch.json:1: lane 0 has 3 x values"), "{err}");
    assert_eq!(err.matches("lane 0").count(), 1, "{err}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), false);
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["trainig"] = serde_json::json!({});
    std::fs::write(&path, json.to_string()).unwrap();
    let out = erfcond(&["train", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("trainig"), "{}", stderr(&out));
}

#[test]
fn cross_matrix_writes_four_cells() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), false);
    let out_dir = dir.path().join("run");
    let out = erfcond(&["cross-matrix", "--config", config.to_str().unwrap(), "--format", "csv", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("matrix.csv")).unwrap();
    assert_eq!(table, stdout(&out));
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("Training Dataset,Testing Dataset,F-1 Score,Precision,Recall,Status\n"));
    assert!(out_dir.join("straight.erfc").exists() && out_dir.join("curved.erfc").exists());

    let out = erfcond(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("straight.erfc").to_str().unwrap(),
        "--domain",
        "curved",
        "--format",
        "csv",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let row = stdout(&out).lines().nth(1).unwrap().to_string();
    let cell = table.lines().find(|l| l.starts_with("straight,curved,")).unwrap();
    assert_eq!(row, cell);
}

#[test]
fn failed_cells_make_the_exit_code_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), true);
    let out_dir = dir.path().join("run");
    let out = erfcond(&["cross-matrix", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let table = stdout(&out);
    assert_eq!(table.lines().filter(|l| l.contains("failed:")).count(), 3, "{table}");
    assert_eq!(table.lines().filter(|l| l.ends_with("| ok |")).count(), 1, "{table}");
}

#[test]
fn missing_dataset_path_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let mut json = serde_json::to_value(ExperimentConfig::toy(0, &[SyntheticPreset::Straight])).unwrap();
    json["domains"][0]["train"] = serde_json::json!({"type": "culane", "list": "nowhere/list.txt"});
    std::fs::write(&path, json.to_string()).unwrap();
    let out = erfcond(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("path does not exist"), "{}", stderr(&out));
    assert!(!dir.path().join("straight.erfc").exists());
}

#[test]
fn bundled_toy_config_is_the_toy_setup() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let parsed = erfcond_core::harness::validate_config(&path).unwrap();
    assert_eq!(parsed, ExperimentConfig::toy(0, &[SyntheticPreset::Straight, SyntheticPreset::Curved]));
}
