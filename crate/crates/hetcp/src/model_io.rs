//! Base and adaptation-pair checkpoints.
//!
//! A base file holds every parameter of a freshly built model. A lift file
//! holds one family's pair plus any encoder parameters its plan retrained;
//! loading re-registers the pair from the metadata and overwrites it.

use std::path::Path;

use hetcp_core::config::ExperimentConfig;
use hetcp_core::pipeline::{Model, PromptInit, StagePlan};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::config_io::config_hash;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CheckpointMeta {
    Base {
        config_hash: String,
        seed: u64,
    },
    Lift {
        config_hash: String,
        seed: u64,
        family: String,
        rank: usize,
        low_rank: bool,
        plan: String,
    },
}

fn meta_of(f: &TensorFile) -> Result<CheckpointMeta> {
    serde_json::from_value(f.header.meta.clone())
        .map_err(|e| CliError::config(format!("checkpoint metadata: {e}")))
}

pub fn base_file(model: &Model<f32>, seed: u64) -> TensorFile {
    let meta = CheckpointMeta::Base {
        config_hash: config_hash(&model.cfg),
        seed,
    };
    let pair = |n: &str| {
        ["aligner.", "lift.", "foreground_new."]
            .iter()
            .any(|p| n.starts_with(p))
    };
    TensorFile::from_store(
        &model.store,
        |n| !pair(n),
        serde_json::to_value(meta).expect("meta serializes"),
    )
}

pub fn save_base(model: &Model<f32>, seed: u64, path: &Path) -> Result<()> {
    base_file(model, seed).write(path)
}

/// Rebuilds the model for `cfg` and loads every base parameter. All
/// parameters of the rebuilt model must be present in the file.
pub fn load_base(cfg: &ExperimentConfig, path: &Path) -> Result<Model<f32>> {
    let f = TensorFile::read(path)?;
    let CheckpointMeta::Base { seed, .. } = meta_of(&f)? else {
        return Err(CliError::config(format!(
            "{}: not a base checkpoint",
            path.display()
        )));
    };
    let mut model = Model::<f32>::new(cfg, seed)?;
    if let Some((_, p)) = model
        .store
        .iter()
        .find(|(_, p)| f.record(&p.name).is_none())
    {
        return Err(CliError::config(format!(
            "{}: base checkpoint lacks `{}`",
            path.display(),
            p.name
        )));
    }
    f.load_into(&mut model.store)?;
    Ok(model)
}

/// The pair of `family` plus every parameter `plan` trains.
pub fn lift_file(
    model: &Model<f32>,
    family: &str,
    plan: &StagePlan,
    label: &str,
    seed: u64,
) -> Result<TensorFile> {
    let pair = model
        .lifts
        .get(family)
        .ok_or_else(|| CliError::config(format!("model has no pair for `{family}`")))?;
    let meta = CheckpointMeta::Lift {
        config_hash: config_hash(&model.cfg),
        seed,
        family: family.into(),
        rank: pair.rank,
        low_rank: pair.low_rank,
        plan: label.into(),
    };
    let prefixes = [
        format!("aligner.{family}."),
        format!("lift.{family}."),
        format!("foreground_new.{family}."),
    ];
    let keep = |n: &str| prefixes.iter().any(|p| n.starts_with(p.as_str())) || plan.is_trainable(n);
    Ok(TensorFile::from_store(
        &model.store,
        keep,
        serde_json::to_value(meta).expect("meta serializes"),
    ))
}

/// Registers the stored pair on `model` and loads it. Returns the family.
pub fn load_lift(model: &mut Model<f32>, path: &Path) -> Result<String> {
    let f = TensorFile::read(path)?;
    let CheckpointMeta::Lift {
        family,
        rank,
        low_rank,
        seed,
        ..
    } = meta_of(&f)?
    else {
        return Err(CliError::config(format!(
            "{}: not a lift checkpoint",
            path.display()
        )));
    };
    model.add_lift(&family, rank, low_rank, PromptInit::Zero, seed)?;
    let prefixes = [
        format!("aligner.{family}."),
        format!("lift.{family}."),
        format!("foreground_new.{family}."),
    ];
    let missing = model
        .store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .find(|n| f.record(n).is_none());
    if let Some(n) = missing {
        return Err(CliError::config(format!(
            "{}: lift checkpoint lacks `{n}`",
            path.display()
        )));
    }
    f.load_into(&mut model.store)?;
    Ok(family)
}
