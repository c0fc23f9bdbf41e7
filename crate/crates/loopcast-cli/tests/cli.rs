//! End-to-end checks of the `loopcast` binary: exit codes, the
//! manifest-first contract, and the staged-checkpoint workflow.

use std::path::Path;
use std::process::Command;

fn loopcast() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loopcast"))
}

/// Small synthetic config so training commands finish in seconds.
fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
seed = 0
horizons = [16]
dataset_name = "ar2"

[data]
source = "ar2"
split = [0.6, 0.2, 0.2]
[data.ar2]
length = 700

[experiment]
observer_window = 3
lookback = 32
train_stride = 16
[experiment.plant]
patch_len = 8
latent_dim = 8
n_ctx = 4
hidden_width = 16
depth = 1
[experiment.pretrain]
max_epochs = 1
lambda = 0.0
[experiment.stage1]
max_epochs = 1
[experiment.stage2]
max_epochs = 1
[experiment.pretrain_corpus]
length = 512
"#,
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown config key.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let status = loopcast()
        .args(["prepare", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("o1"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Malformed --set override.
    let status = loopcast()
        .args(["prepare", "--set", "not-an-assignment"])
        .arg("--out")
        .arg(dir.path().join("o2"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Unknown subcommand is a clap usage error (clap uses exit code 2).
    let status = loopcast().arg("frobnicate").status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn prepare_writes_manifest_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    let output = loopcast()
        .args(["prepare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prepare");
    assert!(manifest["config_hash"].as_str().unwrap().starts_with("0x"));
    assert!(out.join("dataset.csv").exists());
    assert!(out.join("dataset.json").exists());
}

#[test]
fn missing_checkpoint_is_runtime_error_with_hint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    let output = loopcast()
        .args(["train-stage1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("pretrain"), "unhelpful diagnostic: {stderr}");
    // The manifest is written even when the command then fails.
    assert!(out.join("manifest.json").exists());
}

#[test]
fn staged_training_and_forecast_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    for sub in ["pretrain", "train-stage1", "train-stage2", "forecast"] {
        let output = loopcast()
            .args([sub, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{sub} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    assert!(out.join("pretrain.json").exists());
    assert!(out.join("stage1.json").exists());
    assert!(out.join("stage2.json").exists());
    assert!(out.join("forecast.jsonl").exists());
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("forecast_metrics.json")).unwrap(),
    )
    .unwrap();
    assert!(metrics["mse"].as_f64().unwrap().is_finite());
}

#[test]
fn out_dir_falls_back_to_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("envout");
    let status = loopcast()
        .args(["prepare", "--config"])
        .arg(&cfg)
        .env("FLLM_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn stability_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let status = loopcast()
        .arg("stability")
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["open_loop.csv", "closed_loop.csv", "stability.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("stability.json")).unwrap())
            .unwrap();
    assert!(report["burn_in"].as_u64().is_some());
}
