//! End-to-end checks of the command-line binary: config plumbing,
//! dataset-generation determinism, and error/exit-code behavior.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cinnreg"))
}

fn run(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    if let Some(dir) = out {
        cmd.env("CINNREG_OUT", dir);
    }
    cmd.output().expect("binary runs")
}

/// Small dataset so generation stays fast.
const TINY: &[&str] = &[
    "--set",
    "phantoms.dims=[16,24,16]",
    "--set",
    "phantoms.spacing_mm=[8.0,8.0,8.0]",
    "--set",
    "phantoms.n_train=2",
    "--set",
    "phantoms.n_test=1",
    "--set",
    "poses_per_phantom=3",
    "--set",
    "camera.detector_px=[16,16]",
    "--set",
    "condnet.image_input_dims=[16,16]",
    "--set",
    "camera.pixel_pitch_mm=16.0",
];

#[test]
fn print_config_roundtrips_and_honors_overrides() {
    let out = run(
        &["--set", "training.batch_size=16", "--set", "seed=9", "print-config"],
        None,
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("json config");
    assert_eq!(v["training"]["batch_size"], 16);
    assert_eq!(v["seed"], 9);
    assert_eq!(v["training"]["stage2_epochs"], 120);
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let out = run(&["--set", "training.no_such_knob=1", "print-config"], None);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no_such_knob"), "stderr: {err}");
}

#[test]
fn invalid_config_value_is_a_usage_error() {
    let out = run(&["--set", "training.lr=-1.0", "print-config"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let mut args = TINY.to_vec();
        args.push("gen-data");
        let out = run(&args, Some(dir));
        assert!(
            out.status.success(),
            "gen-data failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut compared = 0;
    for entry in walk(&a.join("data")) {
        let rel = entry.strip_prefix(&a).unwrap();
        let other = b.join(rel);
        let bytes_a = std::fs::read(&entry).unwrap();
        let bytes_b = std::fs::read(&other).unwrap_or_default();
        assert_eq!(bytes_a, bytes_b, "artifact differs: {}", rel.display());
        compared += 1;
    }
    assert!(compared > 4, "expected several artifacts, saw {compared}");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn train_without_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train"], Some(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infer_with_missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &["infer", "--volume", "nope.vol", "--image", "nope.img"],
        Some(tmp.path()),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_override_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    let mut cfg = cinnreg::config::RunConfig::default();
    cfg.training.lr = 0.5;
    cfg.seed = 3;
    cfg.save(&cfg_path).unwrap();
    let out = run(
        &[
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "seed=4",
            "print-config",
        ],
        None,
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["training"]["lr"], 0.5, "file value survives");
    assert_eq!(v["seed"], 4, "override wins over file");
}
