//! Self-describing checkpoint files.
//!
//! Layout: magic `DMX3`, `u32` format version, `u64` header length, a JSON
//! header, then little-endian `f32` payloads in header order. Offsets in the
//! header count from the first payload byte.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ModelWeights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DMX3";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Free-form training metadata (step counters, histories, configs).
    pub metadata: serde_json::Value,
    /// Tensors stored after the model weights, such as optimizer moments.
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            metadata: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    training: serde_json::Value,
    weight_count: usize,
    tensors: IndexMap<String, Entry>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, ModelError> {
    let all: Vec<(&str, &Tensor)> = ckpt
        .model
        .weights()
        .iter()
        .chain(ckpt.extra.iter().map(|(n, t)| (n.as_str(), t)))
        .collect();
    let mut tensors = IndexMap::new();
    let mut offset = 0u64;
    for (name, t) in &all {
        let length = 4 * t.len() as u64;
        let entry = Entry {
            shape: t.shape().to_vec(),
            offset,
            length,
        };
        if tensors.insert(name.to_string(), entry).is_some() {
            return Err(corrupt(format!("duplicate tensor name `{name}`")));
        }
        offset += length;
    }
    let header = Header {
        model_config: ckpt.model.config().clone(),
        training: ckpt.metadata.clone(),
        weight_count: ckpt.model.weights().len(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).expect("length checked");
    let json = body.get(..hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, e) in header.tensors {
        let count: usize = e.shape.iter().product();
        if e.length != 4 * count as u64 {
            return Err(corrupt(format!("tensor `{name}` length disagrees with its shape")));
        }
        let raw = usize::try_from(e.offset)
            .ok()
            .and_then(|o| payload.get(o..o + e.length as usize))
            .ok_or_else(|| corrupt(format!("tensor `{name}` runs past end of file")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&e.shape, data).map_err(|err| corrupt(err.to_string()))?;
        tensors.push((name, t));
    }
    if header.weight_count > tensors.len() {
        return Err(corrupt("weight count exceeds stored tensors"));
    }
    let extra = tensors.split_off(header.weight_count);
    let weights = ModelWeights::from_pairs(tensors)?;
    Ok(Checkpoint {
        model: Model::from_weights(header.model_config, weights)?,
        metadata: header.training,
        extra,
    })
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let path = path.as_ref();
    let bytes = write_checkpoint(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    read_checkpoint(&fs::read(path)?)
}
