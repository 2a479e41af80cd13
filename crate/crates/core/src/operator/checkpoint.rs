//! Single-file model container.
//!
//! Layout: 8 magic bytes, header length as u64 LE, UTF-8 JSON header, then
//! every parameter as f64 LE in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore, VsGnoModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPKGNO\x00\x01";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    #[default]
    Model,
    /// Debug predictor that returns the ground truth; carries no parameters.
    EchoTruth,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: ModelConfig,
    edge_count: usize,
    params: Vec<Entry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub edge_count: usize,
    pub params: ParamStore,
    /// Free-form run information (epoch, metrics, dataset shape).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &VsGnoModel, metadata: serde_json::Value) -> Self {
        Checkpoint {
            kind: CheckpointKind::Model,
            config: model.config().clone(),
            edge_count: model.edge_count(),
            params: model.params().clone(),
            metadata,
        }
    }

    pub fn echo_truth(config: ModelConfig, edge_count: usize) -> Self {
        Checkpoint {
            kind: CheckpointKind::EchoTruth,
            config,
            edge_count,
            params: ParamStore::new(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn into_model(self) -> Result<VsGnoModel> {
        if self.kind != CheckpointKind::Model {
            return Err(Error::Incompatible("checkpoint holds no model parameters".into()));
        }
        VsGnoModel::from_params(self.config, self.edge_count, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            edge_count: self.edge_count,
            params: self
                .params
                .iter()
                .map(|(name, t)| Entry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.total_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let bad = |d: String| Error::format(file, d);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let mut data = &body[hlen..];
        let mut params = ParamStore::new();
        for entry in header.params {
            let len: usize = entry.shape.iter().product();
            if data.len() < 8 * len {
                return Err(bad(format!("truncated data for parameter {}", entry.name)));
            }
            let values = data[..8 * len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * len..];
            if params.contains(&entry.name) {
                return Err(bad(format!("duplicate parameter {}", entry.name)));
            }
            params.insert(entry.name, Tensor::new(entry.shape, values)?);
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            edge_count: header.edge_count,
            params,
            metadata: header.metadata,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
