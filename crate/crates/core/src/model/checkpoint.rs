use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, TopoFormer};
use crate::numeric::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot decode checkpoint: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

/// On-disk model: config echo plus every parameter by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

impl TopoFormer {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model described by `file.config` and loads every tensor
    /// into it; names and shapes must match exactly.
    pub fn from_file(file: ModelFile) -> Result<Self, CheckpointError> {
        if file.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: file.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut model = TopoFormer::new(file.config)?;
        if file.params.len() != model.store.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors stored, model has {}",
                file.params.len(),
                model.store.len()
            )));
        }
        for t in file.params {
            let id = model
                .store
                .find(&t.name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor `{}`", t.name)))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != t.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name,
                    t.value.shape(),
                    p.value.shape()
                )));
            }
            if !t.value.is_finite() {
                return Err(CheckpointError::Mismatch(format!("tensor `{}` is not finite", t.name)));
            }
            p.value = t.value;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_file())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let raw: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let found = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(CheckpointError::Version {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        Self::from_file(serde_json::from_value(raw)?)
    }
}
