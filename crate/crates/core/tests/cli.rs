mod common;

use std::process::Command;

fn hazlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hazlab"))
}

#[test]
fn missing_config_is_an_io_error() {
    let out = hazlab()
        .args(["run", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.json"));
}

#[test]
fn unknown_flag_prints_usage() {
    let out = hazlab().args(["run", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr)
        .to_lowercase()
        .contains("usage"));
}

#[test]
fn selftest_passes() {
    let out = hazlab().arg("selftest").output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn gen_adapt_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("flood.hzds");
    let status = hazlab()
        .args([
            "gen", "--task", "flood", "--count", "12", "--seed", "3", "--out",
        ])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let samples = hazlab::datasets::read_dataset(&data).unwrap();
    assert_eq!(samples.len(), 12);

    let model = hazlab::unet::Model::build(&hazlab::unet::UNetConfig::micro(
        hazlab::unet::BackboneVariant::SqueezeExcite,
        3,
        4,
        1,
    ))
    .unwrap();
    let ckpt = dir.path().join("m.hzmd");
    hazlab::unet::save_checkpoint(&model, &serde_json::json!({}), &ckpt).unwrap();
    let adapted = dir.path().join("adapted.hzmd");
    let status = hazlab()
        .args(["adapt", "--k", "4", "--seed", "2", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&adapted)
        .status()
        .unwrap();
    assert!(status.success());
    let (m2, _) = hazlab::unet::load_checkpoint(&adapted).unwrap();
    assert!(!m2.bit_eq(&model));

    let metrics = dir.path().join("eval");
    let out = hazlab()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&adapted)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(metrics.join("metrics.csv").is_file());
    assert!(metrics.join("significance.csv").is_file());
}

#[test]
fn run_then_report_from_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, common::tiny_config(&run_dir).to_json()).unwrap();
    let status = hazlab()
        .arg("run")
        .arg("--config")
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert!(status.success());
    let chart = run_dir.join("report/flood.svg");
    let first = common::read(&chart);
    std::fs::remove_file(&chart).unwrap();
    let status = hazlab()
        .arg("report")
        .arg("--input")
        .arg(&run_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(common::read(&chart), first);
}
