//! Run manifests and checkpoints.
//!
//! `manifest.json` records the resolved config and library version and, for
//! runs that keep a model, an index into `checkpoint.bin`. The blob holds
//! every parameter array in manifest order as little-endian floats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Precision};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ToyBackbone};
use crate::tensor::{Real, Snapshot, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub bytes: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub model: ModelConfig,
    pub precision: Precision,
    pub blob: String,
    pub tensors: Vec<TensorIndex>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub library: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub checkpoint: Option<CheckpointIndex>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            library: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            checkpoint: None,
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn precision_of<S: Real>() -> Precision {
    if S::BYTES == 8 {
        Precision::F64
    } else {
        Precision::F32
    }
}

/// Writes `manifest.json` and `checkpoint.bin` under `dir`.
pub fn save_checkpoint<S: Real>(dir: &Path, config: &ExperimentConfig, model: &ToyBackbone<S>) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for e in model.store.entries() {
        let offset = blob.len();
        for &v in e.value.data() {
            v.extend_le_bytes(&mut blob);
        }
        tensors.push(TensorIndex {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            dtype: S::DTYPE.to_string(),
            offset,
            bytes: blob.len() - offset,
            trainable: e.trainable,
        });
    }
    let mut manifest = Manifest::new(config);
    manifest.checkpoint = Some(CheckpointIndex {
        model: model.config.clone(),
        precision: precision_of::<S>(),
        blob: BLOB.to_string(),
        tensors,
    });
    manifest.write(dir)?;
    fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

/// Rebuilds the model recorded under `dir`. The element type must match the
/// stored precision.
pub fn load_checkpoint<S: Real>(dir: &Path) -> Result<(Manifest, ToyBackbone<S>)> {
    let manifest = Manifest::read(dir)?;
    let index = manifest
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{} holds no checkpoint", dir.display())))?;
    if index.precision != precision_of::<S>() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {}, requested {}",
            index.precision.as_str(),
            S::DTYPE
        )));
    }
    let blob = fs::read(dir.join(&index.blob))?;
    let mut entries = Vec::with_capacity(index.tensors.len());
    for t in &index.tensors {
        let numel: usize = t.shape.iter().product();
        if t.dtype != S::DTYPE || t.bytes != numel * S::BYTES || t.offset + t.bytes > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} does not fit the blob", t.name)));
        }
        let data = blob[t.offset..t.offset + t.bytes]
            .chunks_exact(S::BYTES)
            .map(S::from_le_slice)
            .collect();
        entries.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    let mut model = build_model::<S>(&index.model)?;
    model
        .store
        .load_snapshot(&Snapshot { entries })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((manifest, model))
}
