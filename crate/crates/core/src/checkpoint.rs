//! Single-file checkpoints.
//!
//! Layout: the 8 magic bytes `VOLSEGCK`, a little-endian `u32` version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GbtSam, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};
use crate::training::Phase;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VOLSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Last finished training phase, if any.
    pub phase_completed: Option<Phase>,
    pub steps: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint<T: Scalar>(model: &GbtSam<T>, phase_completed: Option<Phase>, steps: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        phase_completed,
        steps,
        tensors: model
            .params()
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = model.params().iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], origin: &str) -> Result<(GbtSam<T>, CheckpointHeader)> {
    let fail = |reason: String| Error::Format {
        path: origin.into(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(fail(format!(
            "header length {hlen} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("header: {e}")))?;
    let payload = &body[hlen..];
    let expected: usize = header.tensors.iter().map(|t| numel(&t.shape) * 4).sum();
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            path: origin.into(),
            expected,
            actual: payload.len(),
        });
    }
    let mut model = GbtSam::<T>::new(header.config.clone())?;
    if model.params().len() != header.tensors.len() {
        return Err(fail(format!(
            "checkpoint has {} tensors, model defines {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    let mut offset = 0;
    for entry in &header.tensors {
        let n = numel(&entry.shape);
        let data: Vec<T> = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        offset += n * 4;
        model
            .params_mut()
            .set(&entry.name, Tensor::from_vec(&entry.shape, data)?)?;
    }
    Ok((model, header))
}

pub fn save_checkpoint<T: Scalar>(
    model: &GbtSam<T>,
    phase_completed: Option<Phase>,
    steps: usize,
    path: &Path,
) -> Result<String> {
    let bytes = encode_checkpoint(model, phase_completed, steps)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(GbtSam<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short id derived from the checkpoint bytes.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    content_hash(bytes)[..12].to_string()
}
