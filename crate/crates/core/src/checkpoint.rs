//! Single-file parameter archive: magic, metadata length (u64 LE), JSON
//! metadata, then every tensor's little-endian bytes in key order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::model::{Adapter, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MPCKPT\x00\x01";
pub const SCHEMA: &str = "modprompt-ckpt/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub shape: Vec<usize>,
    /// Element offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub dtype: String,
    pub grid: (usize, usize),
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub vocab: Vec<String>,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub adapter: Adapter,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (strategy, seed, …).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path, extra: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0;
    for (key, t) in model.params.iter() {
        tensors.push(TensorEntry {
            key: key.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let meta = CheckpointMeta {
        schema: SCHEMA.to_string(),
        dtype: T::DTYPE.to_string(),
        grid: model.detector.grid(),
        embed_dim: model.detector.embed_dim,
        vocab: model.vocab.clone(),
        detector: model.detector.clone(),
        loss: model.loss.clone(),
        adapter: model.adapter.clone(),
        digest: model.params.digest(|_| true),
        tensors,
        extra,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<(CheckpointMeta, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint archive"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + n)
        .ok_or_else(|| corrupt(path, "truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| corrupt(path, e.to_string()))?;
    if meta.schema != SCHEMA {
        return Err(corrupt(path, format!("unsupported schema {:?}", meta.schema)));
    }
    Ok((meta, bytes[16 + n..].to_vec()))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, serde_json::Value)> {
    let (meta, data) = read_meta(path)?;
    if meta.dtype != T::DTYPE {
        return Err(corrupt(path, format!("stored as {}, requested {}", meta.dtype, T::DTYPE)));
    }
    let w = T::byte_width();
    let mut params = ParamStore::new();
    let mut expected = 0;
    for e in &meta.tensors {
        if e.offset != expected {
            return Err(corrupt(path, format!("tensor {} out of order", e.key)));
        }
        let len: usize = e.shape.iter().product();
        let raw = data
            .get(e.offset * w..(e.offset + len) * w)
            .ok_or_else(|| corrupt(path, format!("tensor {} truncated", e.key)))?;
        let vals = raw.chunks_exact(w).map(T::read_le).collect();
        params.insert(e.key.clone(), Tensor::from_vec(&e.shape, vals)?);
        expected += len;
    }
    if expected * w != data.len() {
        return Err(corrupt(path, "trailing bytes after the last tensor"));
    }
    if params.digest(|_| true) != meta.digest {
        return Err(corrupt(path, "parameter digest mismatch"));
    }
    if meta.detector.grid() != meta.grid || meta.detector.embed_dim != meta.embed_dim {
        return Err(corrupt(path, "metadata grid or D disagrees with the detector config"));
    }
    let model = Model {
        detector: meta.detector,
        loss: meta.loss,
        vocab: meta.vocab,
        adapter: meta.adapter,
        params,
    };
    model.bank()?;
    Ok((model, meta.extra))
}
