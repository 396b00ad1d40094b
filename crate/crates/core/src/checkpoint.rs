//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"ATNCKPT1"                 8-byte magic
//! u64 little-endian           header length in bytes
//! JSON header                 format, version, configs, tensor directory
//! f64 little-endian values    every tensor in directory order, row-major
//! ```
//!
//! Tensor names are `base.*` for the frozen model and `adapters.*` for the
//! trained adapters. Values are stored as raw bits, so a save/load round trip
//! is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterSet};
use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"ATNCKPT1";
pub const FORMAT: &str = "attnalign-checkpoint";
pub const VERSION: u32 = 1;
const ADAPTER_PREFIX: &str = "adapters.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub adapters: Option<AdapterConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub base: BaseModel,
    pub adapters: Option<AdapterSet>,
}

impl Checkpoint {
    /// Errors unless the stored model geometry equals `expected`.
    pub fn require_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.base.config != expected {
            return Err(Error::Compatibility(format!(
                "checkpoint model {:?} differs from configured {:?}",
                self.base.config, expected
            )));
        }
        Ok(())
    }
}

fn entries<'a>(store: &'a ParamStore, prefix: &'a str) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    store.iter().map(move |p| (format!("{prefix}{}", p.name), &p.value))
}

pub fn to_bytes(base: &BaseModel, adapters: Option<&AdapterSet>) -> Result<Vec<u8>> {
    let mut all: Vec<(String, &Tensor)> = entries(&base.store, "").collect();
    if let Some(a) = adapters {
        all.extend(entries(&a.store, ADAPTER_PREFIX));
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        model: base.config.clone(),
        adapters: adapters.map(|a| a.config.clone()),
        tensors: all.iter().map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let values: usize = all.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let body = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Compatibility(format!("unknown checkpoint format {}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Compatibility(format!("checkpoint version {} is not {VERSION}", header.version)));
    }
    Ok((header, &bytes[16 + len..]))
}

/// Fills `store` from the directory; every parameter must be present once
/// with its expected shape.
fn fill(store: &mut ParamStore, prefix: &str, found: &mut std::collections::HashMap<String, Tensor>) -> Result<()> {
    let mut values = Vec::with_capacity(store.len());
    for p in store.iter() {
        let name = format!("{prefix}{}", p.name);
        let t = found.remove(&name).ok_or_else(|| Error::Compatibility(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Compatibility(format!(
                "{name}: stored shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        values.push(t);
    }
    store.set_values(values)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, mut data) = read_header(bytes)?;
    let mut found = std::collections::HashMap::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = data.get(..8 * n).ok_or_else(|| Error::Format(format!("truncated data in {}", e.name)))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        data = &data[8 * n..];
        if found.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?).is_some() {
            return Err(Error::Format(format!("tensor {} stored twice", e.name)));
        }
    }
    if !data.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", data.len())));
    }
    let mut base = BaseModel::new(header.model.clone(), 0)?;
    fill(&mut base.store, "", &mut found)?;
    let adapters = match header.adapters {
        Some(cfg) => {
            let mut set = AdapterSet::new(cfg, &header.model, 0)?;
            fill(&mut set.store, ADAPTER_PREFIX, &mut found)?;
            Some(set)
        }
        None => None,
    };
    if let Some(extra) = found.keys().min() {
        return Err(Error::Compatibility(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(Checkpoint { base, adapters })
}

pub fn save(path: &Path, base: &BaseModel, adapters: Option<&AdapterSet>) -> Result<()> {
    std::fs::write(path, to_bytes(base, adapters)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests;
