use std::path::{Path, PathBuf};
use std::process::Command;

use genbound::cli::{cmd_bound, cmd_compare, cmd_train, with_workers, ExperimentConfig};
use genbound::data_io::{encode_idx_images, encode_idx_labels};

const BLOBS: &str = r#"{
  "dataset": {"synthetic": {"family": {"kind": "two-blob", "separation": 2.0, "dim": 3, "noise": 1.0}, "n": 60, "seed": 1}},
  "model": {"architecture": {"kind": "mlp", "hidden": [4]}, "surrogate": "cross-entropy", "eval_loss": "zero-one"},
  "schedule": {
    "eta": {"kind": "step-decay", "eta0": 0.05, "decay_steps": 20, "decay_rate": 0.9},
    "beta": {"kind": "capped-exponential", "c": 10.0, "k": 10.0, "cap": 1000.0}
  },
  "epochs": 2,
  "batch_size": 6,
  "estimators": ["sgld-bounded", "baseline-gradnorm", "mi", "dmi", "klb", "baseline-lipschitz"],
  "R_outer": 4,
  "R_inner": 3,
  "loss": {"kind": "zero-one"},
  "init": {"kind": "gaussian", "std": 0.3},
  "eval_fraction": 0.2,
  "runs": 3,
  "master_seed": 5
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_genbound"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn outputs_identical_across_worker_counts() {
    let resolved = ExperimentConfig::parse(BLOBS).unwrap().resolve(None).unwrap();
    for run in [cmd_train, cmd_bound, cmd_compare] {
        let one = with_workers(Some(1), || run(&resolved)).unwrap().unwrap();
        let four = with_workers(Some(4), || run(&resolved)).unwrap().unwrap();
        let again = run(&resolved).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, again);
    }
}

#[test]
fn binary_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "blobs.json", BLOBS);
    for sub in ["train", "bound"] {
        let mut outputs = Vec::new();
        for workers in ["1", "3"] {
            let out = bin()
                .args([sub, "--config", config.to_str().unwrap(), "--workers", workers])
                .output()
                .unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            outputs.push(out.stdout);
        }
        let env = bin()
            .args([sub, "--config", config.to_str().unwrap()])
            .env("GENBOUND_WORKERS", "2")
            .output()
            .unwrap();
        outputs.push(env.stdout);
        assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn out_dir_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "blobs.json", BLOBS);
    let out = dir.path().join("results");
    let status = bin()
        .args(["bound", "--config", config.to_str().unwrap(), "--seed", "77", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("bound.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["master_seed"], 77);
    assert_eq!(json["config"]["master_seed"], 77);
    let ids: Vec<&str> = json["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["estimator_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["sgld-bounded", "baseline-gradnorm", "mi", "dmi", "klb", "baseline-lipschitz"]);
    for e in json["estimates"].as_array().unwrap() {
        assert!(e["value"].as_f64().unwrap() >= 0.0);
        assert_eq!(e["config_echo"]["master_seed"], 77);
    }
}

#[test]
fn artifact_reproducible_from_header() {
    let resolved = ExperimentConfig::parse(BLOBS).unwrap().resolve(None).unwrap();
    let csv = cmd_train(&resolved).unwrap();
    let echoed = csv
        .lines()
        .find_map(|l| l.strip_prefix("# config: "))
        .unwrap();
    let replay = ExperimentConfig::parse(echoed).unwrap().resolve(None).unwrap();
    assert_eq!(cmd_train(&replay).unwrap(), csv);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), "typo.json", &BLOBS.replace("\"decay_rate\"", "\"decay_rat\""));
    let out = bin().args(["train", "--config", typo.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule.eta"));

    let diverging = r#"{
      "dataset": {"synthetic": {"family": {"kind": "linear-regression", "weights": [1.0, -1.0], "noise": 0.1}, "n": 20, "seed": 1}},
      "model": {"architecture": {"kind": "linear-regression"}, "surrogate": "squared", "eval_loss": "squared"},
      "schedule": {"eta": {"kind": "constant", "eta0": 5.0}, "beta": {"kind": "constant", "beta0": 1000.0}},
      "steps": 2000, "batch_size": 5, "loss": {"kind": "subgaussian", "sigma": 1.0}, "master_seed": 1
    }"#;
    let diverging = write_config(dir.path(), "diverge.json", diverging);
    let out = bin().args(["train", "--config", diverging.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let ok = bin().arg("stats-check").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = bin().args(["stats-check", "--perturb", "hypergeometric-moments"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("HypergeometricMoments"));
}

#[test]
fn analytic_subcommand_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "analytic.json",
        r#"{"setup": {"n": 10, "family": {"kind": "normal", "mean": 0.0, "std": 1.0}, "beta": 50.0,
             "eta": {"kind": "constant", "eta0": 0.01}, "steps": 20, "sigma": 1.0},
            "R_outer": 100, "master_seed": 3}"#,
    );
    let out = bin().args(["analytic", "--config", config.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["verdict"]["z_score"].as_f64().unwrap().abs() <= 3.0);
    assert!(json["verdict"]["closed_form"].as_f64().unwrap() <= json["comparison_bound"].as_f64().unwrap());
}

#[test]
fn idx_dataset_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<Vec<u8>> = (0..30u8)
        .map(|i| (0..4u8).map(|p| if (i % 2 == 0) == (p < 2) { 200 + p } else { 10 + i }).collect())
        .collect();
    let labels: Vec<u8> = (0..30u8).map(|i| i % 2).collect();
    let img_path = dir.path().join("images.idx3-ubyte");
    let lab_path = dir.path().join("labels.idx1-ubyte");
    std::fs::write(&img_path, encode_idx_images(2, 2, &images)).unwrap();
    std::fs::write(&lab_path, encode_idx_labels(&labels)).unwrap();
    let text = format!(
        r#"{{
          "dataset": {{"idx": {{"images": {:?}, "labels": {:?}, "limit": 24}}}},
          "model": {{"architecture": {{"kind": "softmax-regression"}}, "surrogate": "cross-entropy", "eval_loss": "zero-one"}},
          "schedule": {{"eta": {{"kind": "constant", "eta0": 0.1}}, "beta": {{"kind": "constant", "beta0": 100.0}}}},
          "steps": 30, "batch_size": 24, "m": 20,
          "estimators": ["ld-subgauss", "ld-bounded-trace", "trace-form", "high-prob"],
          "delta": 0.05, "R_outer": 3, "R_inner": 2,
          "loss": {{"kind": "zero-one"}}, "master_seed": 1
        }}"#,
        img_path.to_str().unwrap(),
        lab_path.to_str().unwrap()
    );
    let resolved = ExperimentConfig::parse(&text).unwrap().resolve(None).unwrap();
    assert_eq!(resolved.n(), 24);
    assert_eq!(resolved.model.input_dim, 4);
    let json: serde_json::Value = serde_json::from_str(&cmd_bound(&resolved).unwrap()).unwrap();
    let estimates = json["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 4);
    for e in estimates {
        let v = e["value"].as_f64().unwrap();
        assert!(v.is_finite() && v > 0.0, "{e}");
    }
}
