//! Named-tensor files: `u64` little-endian header length, a JSON header, then
//! an f32 little-endian blob.
//!
//! Records are written in store order with offsets in bytes from the start
//! of the blob. Datasets reuse the format for per-sample records.

use std::fs;
use std::path::Path;

use hetcp_core::autodiff::ParameterStore;
use hetcp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub records: Vec<Record>,
    /// Free-form metadata; its meaning depends on the file kind.
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A decoded file: header plus raw blob.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: Header,
    pub blob: Vec<u8>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            header: Header {
                records: Vec::new(),
                meta,
            },
            blob: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: &Tensor, frozen: bool) {
        self.header.records.push(Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset: self.blob.len(),
            frozen,
        });
        for v in t.data() {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn from_store(
        store: &ParameterStore<f32>,
        mut keep: impl FnMut(&str) -> bool,
        meta: serde_json::Value,
    ) -> Self {
        let mut f = Self::new(meta);
        for (_, p) in store.iter().filter(|(_, p)| keep(&p.name)) {
            f.push(&p.name, &p.tensor, p.frozen);
        }
        f
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.header.records.iter().find(|r| r.name == name)
    }

    /// Raw bytes of one record.
    pub fn bytes(&self, r: &Record) -> &[u8] {
        let n: usize = r.shape.iter().product();
        &self.blob[r.offset..r.offset + 4 * n]
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self
            .record(name)
            .ok_or_else(|| CliError::config(format!("record `{name}` not found")))?;
        let data = self
            .bytes(r)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor::new(&r.shape, data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + self.blob.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.blob);
        out
    }

    /// Parses and bounds-checks every record.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let len = bytes.get(..8).ok_or("truncated header length")?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        let head = bytes
            .get(8..8usize.saturating_add(len))
            .ok_or("truncated header")?;
        let header: Header =
            serde_json::from_slice(head).map_err(|e| format!("bad header: {e}"))?;
        let blob = bytes[8 + len..].to_vec();
        for r in &header.records {
            if r.dtype != DTYPE {
                return Err(format!("record `{}` has dtype {}", r.name, r.dtype));
            }
            let n: usize = r.shape.iter().product();
            if r.offset % 4 != 0 || r.offset + 4 * n > blob.len() {
                return Err(format!("record `{}` lies outside the blob", r.name));
            }
        }
        Ok(Self { header, blob })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| CliError::io(path, e))
    }

    /// Copies every record into the same-named parameter. Every record must
    /// name an existing parameter of the same shape; freeze flags are taken
    /// from the file.
    pub fn load_into(&self, store: &mut ParameterStore<f32>) -> Result<usize> {
        for r in &self.header.records {
            let id = store.id(&r.name).ok_or_else(|| {
                CliError::config(format!("checkpoint record `{}` has no parameter", r.name))
            })?;
            let t = self.tensor(&r.name)?;
            let p = store.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(CliError::config(format!(
                    "checkpoint record `{}` has shape {:?}, model expects {:?}",
                    r.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
            p.frozen = r.frozen;
        }
        Ok(self.header.records.len())
    }

    /// Sum of element counts over records not marked frozen.
    pub fn trainable_count(&self) -> usize {
        self.header
            .records
            .iter()
            .filter(|r| !r.frozen)
            .map(|r| r.shape.iter().product::<usize>())
            .sum()
    }
}
