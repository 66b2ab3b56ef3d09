use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinnModel, ModelConfig, ModelError, Param};
use crate::diffcore::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// First line of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Free-form training settings stored alongside the model.
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
    pub manifest: Vec<(String, Vec<usize>)>,
}

/// Serializes as one JSON line, a newline, then every parameter as
/// little-endian `f32` in manifest order.
pub fn checkpoint_bytes(model: &BinnModel, hyperparameters: serde_json::Value) -> Result<Vec<u8>, ModelError> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config.clone(),
        hyperparameters,
        manifest: model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
    };
    let mut out = serde_json::to_vec(&meta)?;
    out.push(b'\n');
    for p in &model.params {
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(BinnModel, CheckpointMeta), ModelError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[..nl])?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let expected = BinnModel::expected_manifest(&meta.model)?;
    if expected != meta.manifest {
        return Err(ModelError::Checkpoint("parameter manifest does not match the model configuration".into()));
    }
    let blob = &bytes[nl + 1..];
    let total: usize = meta.manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(ModelError::Checkpoint(format!("weights have {} bytes, expected {}", blob.len(), total * 4)));
    }
    let mut values = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let params = meta
        .manifest
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Ok(Param {
                name: name.clone(),
                value: Tensor::new(shape.clone(), data)?,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    if params.iter().any(|p| !p.value.is_finite()) {
        return Err(ModelError::Checkpoint("non-finite weight".into()));
    }
    Ok((
        BinnModel {
            config: meta.model.clone(),
            params,
        },
        meta,
    ))
}

pub fn save_checkpoint(model: &BinnModel, hyperparameters: serde_json::Value, path: &Path) -> Result<(), ModelError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_bytes(model, hyperparameters)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(BinnModel, CheckpointMeta), ModelError> {
    checkpoint_from_bytes(&fs::read(path)?)
}

impl BinnModel {
    /// Parameters rounded through `f32`, as a checkpoint stores them.
    pub fn rounded(&self) -> Self {
        let mut m = self.clone();
        for p in &mut m.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        m
    }
}
