//! Self-describing parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "G2CKPT\0\1"
//! 8       4     format version (u32, currently 1)
//! 12      8     header length H in bytes (u64)
//! 20      H     UTF-8 JSON header:
//!                 { "config": ModelConfig,
//!                   "meta":   arbitrary JSON object,
//!                   "tensors": [ { "name", "shape", "offset" } ... ] }
//!               where "offset" counts f32 elements from the start of the data block
//! 20+H    4*N   data block: every tensor as little-endian f32, in header order
//! end-32  32    SHA-256 of all preceding bytes
//! ```
//!
//! Writes go through a temp file and a rename, so a crash never leaves a
//! truncated checkpoint under the final name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"G2CKPT\0\x01";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams<f32>, meta: serde_json::Value) -> Self {
        Self {
            config: params.config().clone(),
            meta,
            tensors: params.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    /// Rebuilds model parameters from the tensors named in canonical order;
    /// extra tensors (optimizer state) are ignored.
    pub fn params(&self) -> Result<ModelParams<f32>, ModelError> {
        let names: Vec<String> = super::param_specs(&self.config).into_iter().map(|s| s.name).collect();
        let mut picked = Vec::with_capacity(names.len());
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            picked.push((name, t.clone()));
        }
        ModelParams::from_named(self.config.clone(), picked)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.numel() as u64;
                e
            })
            .collect();
        let header = Header { config: self.config.clone(), meta: self.meta.clone(), tensors: entries };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset as usize + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic or too short)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
        let data = &body[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize * 4;
            let chunk = data.get(start..start + 4 * n).ok_or_else(|| bad("tensor data overruns file"))?;
            let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name, Tensor::new(e.shape, values)?));
        }
        Ok(Self { config: header.config, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        crate::util::atomic_write(path, &self.to_bytes()).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        Self::from_bytes(&bytes)
    }
}

/// Saves bare model parameters.
pub fn save_params(params: &ModelParams<f32>, path: &Path) -> Result<(), ModelError> {
    Checkpoint::from_params(params, serde_json::json!({})).save(path)
}

pub fn load_params(path: &Path) -> Result<ModelParams<f32>, ModelError> {
    Checkpoint::load(path)?.params()
}
