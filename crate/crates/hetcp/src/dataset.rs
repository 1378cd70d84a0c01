//! Dataset directories: `manifest.txt` plus one record file per sample.
//!
//! Sample contents are a pure function of the data hash, seed, split and
//! index, so a manifest reproduces every record byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hetcp_core::config::ExperimentConfig;
use hetcp_core::geometry::AgentPose;
use hetcp_core::pipeline::observation_seed;
use hetcp_core::pipeline::{generate_sample, SampleRecord, Split};
use hetcp_core::scene::observe;
use hetcp_core::Tensor;
use serde::Serialize;

use crate::checkpoint::TensorFile;
use crate::config_io::{config_hash, data_hash, sha256_hex};
use crate::error::{CliError, IoContext, Result};
use crate::parallel::par_map;

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT: &str = "hetcp-dataset-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::config(format!("manifest lacks `{key}`")))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("manifest line without `=`: {line}")))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }
}

fn record_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.name()).join(format!("{index:06}.bin"))
}

/// One sample as a tensor file: the record in the header, object boxes and
/// the ego observation as tensors.
pub fn encode_record(cfg: &ExperimentConfig, rec: &SampleRecord) -> Result<TensorFile> {
    let mut f = TensorFile::new(serde_json::to_value(rec).expect("record serializes"));
    let boxes: Vec<f32> = rec
        .scene
        .objects
        .iter()
        .flat_map(|b| [b.x, b.y, b.width, b.length, b.heading])
        .collect();
    f.push(
        "objects",
        &Tensor::new(&[rec.scene.objects.len(), 5], boxes)?,
        true,
    );
    let ego = observe(
        &rec.scene,
        &cfg.grid,
        &cfg.scene,
        &AgentPose::IDENTITY,
        cfg.ego()?,
        0,
        observation_seed(rec, 0),
    );
    f.push("raw.ego", &ego.raw, true);
    Ok(f)
}

fn split_len(cfg: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.scene.train_samples,
        Split::Test => cfg.scene.test_samples,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    pub manifest_sha256: String,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Object count -> number of samples, both splits.
    pub object_histogram: BTreeMap<usize, usize>,
}

/// Writes every record and the manifest. Rewriting with the same inputs
/// produces identical files.
pub fn generate(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<GenSummary> {
    let mut digest = String::new();
    let mut histogram = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).at(&sub)?;
        let idx: Vec<usize> = (0..split_len(cfg, split)).collect();
        let hashes = par_map(&idx, |&i| -> Result<(usize, String)> {
            let rec = generate_sample(cfg, seed, split, i)?;
            let bytes = encode_record(cfg, &rec)?.to_bytes();
            let path = record_path(dir, split, i);
            fs::write(&path, &bytes).at(&path)?;
            Ok((rec.scene.objects.len(), sha256_hex(&bytes)))
        })?;
        for (n, h) in hashes {
            *histogram.entry(n).or_insert(0) += 1;
            digest.push_str(&h);
        }
    }
    let g = &cfg.grid;
    let entries = [
        ("format", FORMAT.to_string()),
        ("seed", seed.to_string()),
        ("config_hash", config_hash(cfg)),
        ("data_hash", data_hash(cfg)),
        ("train_samples", cfg.scene.train_samples.to_string()),
        ("test_samples", cfg.scene.test_samples.to_string()),
        ("grid", format!("{}x{}@{}", g.height, g.width, g.resolution)),
        ("records_sha256", sha256_hex(digest.as_bytes())),
    ];
    let manifest = Manifest {
        entries: entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    };
    let text = manifest.render();
    let path = dir.join(MANIFEST);
    fs::write(&path, &text).at(&path)?;
    Ok(GenSummary {
        manifest_sha256: sha256_hex(text.as_bytes()),
        train_samples: cfg.scene.train_samples,
        test_samples: cfg.scene.test_samples,
        object_histogram: histogram,
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub manifest: Manifest,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Reads a dataset written for a configuration with the same data hash.
pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let manifest = Manifest::parse(&fs::read_to_string(&mpath).at(&mpath)?)?;
    if manifest.get("format")? != FORMAT {
        return Err(CliError::config(format!(
            "{}: unknown dataset format",
            mpath.display()
        )));
    }
    if manifest.get("data_hash")? != data_hash(cfg) {
        return Err(CliError::config(format!(
            "{}: dataset was generated for a different grid/scene/sensor configuration",
            mpath.display()
        )));
    }
    let seed: u64 = manifest
        .get("seed")?
        .parse()
        .map_err(|_| CliError::config("manifest seed is not an integer"))?;
    let read = |split: Split| -> Result<Vec<SampleRecord>> {
        let n: usize = manifest
            .get(&format!("{}_samples", split.name()))?
            .parse()
            .map_err(|_| CliError::config("manifest sample count is not an integer"))?;
        let idx: Vec<usize> = (0..n).collect();
        par_map(&idx, |&i| {
            let path = record_path(dir, split, i);
            let f = TensorFile::read(&path)?;
            let rec: SampleRecord = serde_json::from_value(f.header.meta.clone())
                .map_err(|e| CliError::io(&path, format!("bad record: {e}")))?;
            if rec.index != i || f.tensor("objects")?.shape() != [rec.scene.objects.len(), 5] {
                return Err(CliError::io(&path, "record does not match its position"));
            }
            Ok(rec)
        })
    };
    Ok(Dataset {
        seed,
        train: read(Split::Train)?,
        test: read(Split::Test)?,
        manifest,
    })
}

/// Dataset from `dir`, or generated in memory when `dir` is `None`.
pub fn load_or_generate(cfg: &ExperimentConfig, dir: Option<&Path>, seed: u64) -> Result<Dataset> {
    match dir {
        Some(d) => load(cfg, d),
        None => {
            let gen = |split| {
                (0..split_len(cfg, split))
                    .map(|i| generate_sample(cfg, seed, split, i))
                    .collect::<Result<Vec<_>, _>>()
            };
            Ok(Dataset {
                seed,
                manifest: Manifest {
                    entries: BTreeMap::new(),
                },
                train: gen(Split::Train)?,
                test: gen(Split::Test)?,
            })
        }
    }
}
