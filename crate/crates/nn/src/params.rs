//! Named parameter storage and the binary weight file.
//!
//! File layout: a little-endian `u64` byte length, a JSON manifest of that length,
//! then every tensor as contiguous little-endian `f32` values in manifest order.
//! Manifest offsets are relative to the start of the tensor data.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::{Shape, Tensor};

pub const WEIGHTS_FORMAT: &str = "ava-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor<f32>,
    /// Buffers such as batch-norm running statistics are stored but not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 4],
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::Argument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::Argument(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| NnError::Argument(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn to_bytes(&self, metadata: Option<&serde_json::Value>) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .entries
            .iter()
            .map(|(name, e)| {
                let rec = TensorRecord {
                    name: name.clone(),
                    shape: e.tensor.shape().0,
                    offset,
                    trainable: e.trainable,
                };
                offset += 4 * e.tensor.len() as u64;
                rec
            })
            .collect();
        let manifest = WeightManifest {
            format: WEIGHTS_FORMAT.to_string(),
            version: WEIGHTS_VERSION,
            metadata: metadata.cloned(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.entries.values() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<serde_json::Value>)> {
        let fmt = |m: &str| NnError::Format(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| fmt("truncated length prefix"))?
            .try_into()
            .unwrap();
        let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| fmt("manifest length overflow"))?;
        let json = bytes
            .get(8..8usize.checked_add(len).ok_or_else(|| fmt("manifest length overflow"))?)
            .ok_or_else(|| fmt("truncated manifest"))?;
        let manifest: WeightManifest = serde_json::from_slice(json)?;
        if manifest.format != WEIGHTS_FORMAT || manifest.version != WEIGHTS_VERSION {
            return Err(NnError::Format(format!(
                "unsupported weight format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let data = &bytes[8 + len..];
        let mut store = ParamStore::new();
        let mut expected = 0u64;
        for rec in manifest.tensors {
            if rec.offset != expected {
                return Err(NnError::Format(format!(
                    "tensor {} at unexpected offset {}",
                    rec.name, rec.offset
                )));
            }
            let shape = Shape(rec.shape);
            let start = rec.offset as usize;
            let end = start + 4 * shape.numel();
            let raw = data
                .get(start..end)
                .ok_or_else(|| NnError::Format(format!("tensor {} truncated", rec.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(rec.name, Tensor::new(shape, values)?, rec.trainable)?;
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(fmt("trailing bytes after tensor data"));
        }
        Ok((store, manifest.metadata))
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: Option<&serde_json::Value>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes(metadata)?).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<serde_json::Value>)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| rng.gen_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}
