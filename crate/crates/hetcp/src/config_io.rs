//! Experiment configuration files and their hashes.

use std::fs;
use std::path::Path;

use hetcp_core::config::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_of<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serializes"))
}

/// Hash of the parsed configuration, independent of file formatting.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hash_of(cfg)
}

/// Hash of the parts that determine dataset contents: grid, scene and sensors.
pub fn data_hash(cfg: &ExperimentConfig) -> String {
    let sensors: Vec<_> = cfg
        .families
        .iter()
        .map(|f| (&f.id, f.seed, &f.sensor))
        .collect();
    hash_of(&(&cfg.grid, &cfg.scene, &cfg.ego_family, sensors))
}

/// Reads, parses and validates a JSON configuration. Every failure is a
/// configuration error naming the path.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}
