//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetcp_core::config::ExperimentConfig;
use hetcp_core::pipeline::gradsuite::e2e_config;

/// The gradient-check configuration with a handful of samples.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = e2e_config();
    cfg.scene.train_samples = 6;
    cfg.scene.test_samples = 4;
    cfg
}

pub fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn hetcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetcp"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs the binary and requires success; returns stdout parsed as JSON.
pub fn hetcp_ok(args: &[&str]) -> serde_json::Value {
    let out = hetcp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Prints the criterion line and fails the test when `pass` is false.
pub fn verdict(n: usize, pass: bool, detail: String) {
    println!(
        "criterion {n}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}
