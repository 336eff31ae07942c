//! Self-describing parameter archive.
//!
//! Layout: the 8-byte magic `DEIDSEQ1`, a little-endian `u64` header length,
//! a UTF-8 JSON header `{"manifest": .., "tensors": [{"name", "shape",
//! "offset"}]}`, then every tensor's values as little-endian `f64` at
//! `offset` (counted in values from the start of the payload).

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"DEIDSEQ1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a deidseq archive (bad magic)")]
    BadMagic,
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("archive has no tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus a JSON manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub manifest: serde_json::Value,
    tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new<M: Serialize>(manifest: &M) -> Result<Self, CheckpointError> {
        Ok(Self {
            manifest: serde_json::to_value(manifest)?,
            tensors: BTreeMap::new(),
        })
    }

    pub fn manifest<M: DeserializeOwned>(&self) -> Result<M, CheckpointError> {
        Ok(serde_json::from_value(self.manifest.clone())?)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Removes and returns `name`, rejecting it unless its shape is `expected`.
    pub fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor, CheckpointError> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if t.shape() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Removes and returns `name` with whatever shape it has.
    pub fn take_any(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        self.tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            manifest: self.manifest.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..)
            .filter(|b| b.len() >= len)
            .ok_or_else(|| CheckpointError::Corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[..len])?;
        let payload = &body[len..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let range = e.offset * 8..(e.offset + n) * 8;
            let raw = payload
                .get(range)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{}` runs past end of file", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, values).map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            manifest: header.manifest,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Copies every parameter of `store` into `archive` under `prefix`.
pub fn export_store(store: &ParamStore, archive: &mut Archive, prefix: &str) {
    for (_, name, t) in store.iter() {
        let mut t = t.clone();
        t.clear_grad();
        archive.insert(format!("{prefix}{name}"), t);
    }
}

/// Overwrites the values of every parameter of `store` from `archive`,
/// rejecting missing tensors and shape mismatches. Trainability flags are
/// left as they are in `store`.
pub fn import_store(store: &mut ParamStore, archive: &mut Archive, prefix: &str) -> Result<(), CheckpointError> {
    let ids: Vec<_> = store
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        let loaded = archive.take(&format!("{prefix}{name}"), &shape)?;
        store.get_mut(id).values_mut().copy_from_slice(loaded.values());
    }
    Ok(())
}
