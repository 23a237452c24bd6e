//! The `VPCK` tensor container.
//!
//! Layout: the 4-byte magic `VPCK`, a little-endian `u32` format version, a
//! little-endian `u64` metadata length, the JSON metadata, then every tensor
//! as little-endian `f32` values in directory order. Directory offsets are
//! byte offsets into the payload and must tile it without gaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vitpose_core::nn::{ModelConfig, PoseModel};
use vitpose_core::rng::RngState;
use vitpose_core::{Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VPCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Absent for plain tensor dumps.
    pub model: Option<ModelConfig>,
    /// Task names in routing order.
    pub tasks: Vec<String>,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form provenance such as the config digest.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Named single-precision tensors plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Metadata,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Self {
        Checkpoint {
            meta: Metadata::default(),
            tensors,
        }
    }

    pub fn from_model<T: Real>(model: &PoseModel<T>) -> Self {
        let cfg = model.config().clone();
        let tensors = model
            .params()
            .iter()
            .map(|(info, t)| (info.name.clone(), t.cast::<f32>()))
            .collect();
        Checkpoint {
            meta: Metadata {
                tasks: cfg.tasks.iter().map(|t| t.name.clone()).collect(),
                model: Some(cfg),
                ..Metadata::default()
            },
            tensors,
        }
    }

    pub fn with_progress(mut self, step: u64, rng: Option<RngState>) -> Self {
        self.meta.step = step;
        self.meta.rng = rng;
        self
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.extra.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_model<T: Real>(&self) -> Result<PoseModel<T>> {
        let cfg = self
            .meta
            .model
            .clone()
            .ok_or_else(|| Error::Corrupt("checkpoint holds no model configuration".into()))?;
        let tensors = self.tensors.iter().map(|(n, t)| (n.clone(), t.cast::<T>())).collect();
        Ok(PoseModel::from_tensors(cfg, tensors)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        let mut offset = 0u64;
        meta.tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let have = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: have,
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: have,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = (HEADER_LEN as u64).checked_add(meta_len).ok_or_else(|| Error::Corrupt("metadata length overflows".into()))?;
        if payload_start > have {
            return Err(Error::Truncated {
                expected: payload_start,
                found: have,
            });
        }
        let json = &bytes[HEADER_LEN..payload_start as usize];
        let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        let mut expect = 0u64;
        for e in &meta.tensors {
            if e.offset != expect {
                return Err(Error::Corrupt(format!(
                    "tensor `{}` starts at byte {} but the previous one ends at {expect}",
                    e.name, e.offset
                )));
            }
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            let len = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Corrupt(format!("tensor `{}` is too large", e.name)))?;
            expect = expect.checked_add(len).ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
        }
        let total = payload_start + expect;
        if total > have {
            return Err(Error::Truncated {
                expected: total,
                found: have,
            });
        }
        if total < have {
            return Err(Error::Corrupt(format!("{} trailing bytes after the payload", have - total)));
        }
        let payload = &bytes[payload_start as usize..];
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in &meta.tensors {
            let start = e.offset as usize;
            let n: usize = e.shape.iter().product();
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(Error::io(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Checkpoint::from_bytes(&bytes)
}
