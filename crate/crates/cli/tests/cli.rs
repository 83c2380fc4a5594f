use std::path::Path;
use std::process::{Command, Output};

use losa_core::config::RunConfig;
use losa_core::driver::prepare;
use losa_core::model::{forward_capture, save_checkpoint};
use losa_core::rmi::importance;
use sha2::{Digest, Sha256};

fn losa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_losa"))
        .args(args)
        .env_remove("LOSA_THREADS")
        .output()
        .expect("spawn losa")
}

const SMALL: &[&str] = &[
    "--set",
    "model.dims=[8, 12, 6]",
    "--set",
    "calib.samples=24",
    "--set",
    "train.epochs=5",
    "--set",
    "schedule.steps=2",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).copied().collect()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn missing_config_is_an_io_error() {
    let out = losa(&["run", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file not found"));
}

#[test]
fn bad_config_names_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[schedule]\nsteps = \"five\"\n").unwrap();
    let out = losa(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("schedule.steps") && err.contains("usize"), "{err}");

    let out = losa(&["run", "--set", "train.epoch=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn help_on_every_subcommand() {
    for sub in ["run", "oneshot", "lora", "nm", "importance", "report"] {
        let out = losa(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn run_twice_gives_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let mut args = with_small(&["run", "--out", dir.path().to_str().unwrap()]);
        args.extend(["--threads", "1"]);
        let out = losa(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["report.json", "steps.csv", "curve.csv", "model.ckpt"] {
        assert_eq!(sha(&dirs[0].path().join(name)), sha(&dirs[1].path().join(name)), "{name}");
    }
}

#[test]
fn report_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 4\n[schedule]\ntheta_f = 0.5\n").unwrap();
    let out_dir = dir.path().join("out");
    let mut args = with_small(&["lora", "--config", cfg.to_str().unwrap()]);
    args.extend(["--set", "schedule.theta_f=0.6", "--out", out_dir.to_str().unwrap()]);
    let out = losa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 4);
    assert_eq!(report["config"]["schedule"]["theta_f"], 0.6);
    assert_eq!(report["config"]["mode"], "lora_baseline");
    assert_eq!(report["eval"]["mergeable"], false);
}

#[test]
fn importance_on_checkpoint_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str("", SMALL.iter().skip(1).step_by(2).copied().collect::<Vec<_>>().as_slice())
        .unwrap();
    let (stack, calib) = prepare(&cfg).unwrap();
    let ckpt = dir.path().join("dense.ckpt");
    save_checkpoint(&ckpt, &stack, None, None).unwrap();
    let expected = importance(
        &forward_capture(&stack, &calib, cfg.model.activation).unwrap(),
        cfg.rmi.importance(),
    )
    .unwrap();

    let out = losa(&with_small(&["importance", "--checkpoint", ckpt.to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let p: Vec<f64> = serde_json::from_value(printed["p"].clone()).unwrap();
    assert_eq!(p.len(), expected.p.len());
    for (got, want) in p.iter().zip(&expected.p) {
        // checkpoints store f32, so the model differs slightly from the f64 one
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn report_subcommand_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = losa(&with_small(&["report", "--out", dir.path().to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let modes: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["oneshot", "lora_baseline", "losa"]);
}

#[test]
fn nm_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_small(&["nm", "--out", dir.path().to_str().unwrap()]);
    args.extend(["--set", "mask.nm_group=4", "--set", "schedule.theta_f=0.5"]);
    let out = losa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["steps"][1]["nm_keep"].is_array());
}
