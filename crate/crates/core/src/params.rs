//! Trainable parameter storage and the checkpoint container.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"MGCK" | u32 version = 1 | u64 header_len | JSON header | f32 payload
//! ```
//!
//! The header maps module name -> tensor name -> `{shape, offset, len}`,
//! where `offset`/`len` are byte positions inside the payload. An opaque
//! `meta` object (model configuration) rides along in the header.

use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<T: Real> {
    module: String,
    name: String,
    value: Tensor<T>,
}

/// All trainable tensors of a model, grouped by module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("tensor {module}/{name}: {reason}")]
    Mismatch {
        module: String,
        name: String,
        reason: String,
    },
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    modules: IndexMap<String, IndexMap<String, TensorMeta>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, module: &str, name: &str, value: Tensor<T>) -> ParamId {
        debug_assert!(self.find(module, name).is_none(), "duplicate parameter {module}/{name}");
        self.entries.push(Entry {
            module: module.to_string(),
            name: name.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, module: &str, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.module == module && e.name == name)
            .map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> (&str, &str) {
        let e = &self.entries[id.0];
        (&e.module, &e.name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|e| &e.value)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    module: e.module.clone(),
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Copies values from `other`, matching tensors by module and name.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<(), CheckpointError> {
        for e in &mut self.entries {
            let id = other
                .find(&e.module, &e.name)
                .ok_or_else(|| CheckpointError::Mismatch {
                    module: e.module.clone(),
                    name: e.name.clone(),
                    reason: "missing from checkpoint".into(),
                })?;
            let v = other.get(id);
            if v.shape() != e.value.shape() {
                return Err(CheckpointError::Mismatch {
                    module: e.module.clone(),
                    name: e.name.clone(),
                    reason: format!("shape {:?} != expected {:?}", v.shape(), e.value.shape()),
                });
            }
            e.value = v.clone();
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    pub fn write_checkpoint<W: Write>(&self, meta: &serde_json::Value, mut w: W) -> Result<usize, CheckpointError> {
        let mut modules: IndexMap<String, IndexMap<String, TensorMeta>> = IndexMap::new();
        let mut offset = 0;
        for e in &self.entries {
            let len = e.value.len() * 4;
            modules.entry(e.module.clone()).or_default().insert(
                e.name.clone(),
                TensorMeta {
                    shape: e.value.shape(),
                    offset,
                    len,
                },
            );
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            meta: meta.clone(),
            modules,
        })
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header.len() + offset);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for e in &self.entries {
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(buf.len())
    }

    /// Reads a checkpoint into a fresh store; returns it with the header `meta`.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated {
                need: 16,
                have: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(CheckpointError::Truncated {
                need: 16 + hlen,
                have: bytes.len(),
            })?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[hend..];
        let mut store = ParamStore::new();
        for (module, tensors) in header.modules {
            for (name, m) in tensors {
                let [rows, cols] = m.shape;
                if m.len != rows * cols * 4 {
                    return Err(CheckpointError::Mismatch {
                        module,
                        name,
                        reason: format!("byte length {} does not match shape {:?}", m.len, m.shape),
                    });
                }
                let end = m.offset + m.len;
                if end > payload.len() {
                    return Err(CheckpointError::Truncated {
                        need: end,
                        have: payload.len(),
                    });
                }
                let data = payload[m.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let value = Tensor::new(rows, cols, data).map_err(|e| CheckpointError::Mismatch {
                    module: module.clone(),
                    name: name.clone(),
                    reason: e.to_string(),
                })?;
                store.add(&module, &name, value);
            }
        }
        Ok((store, header.meta))
    }
}

/// Registers parameters under a module prefix with seeded initialization.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, module: &str, name: &str, rows: usize, cols: usize, std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std.max(1e-12)).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::new(rows, cols, data).expect("shape");
        self.store.add(module, name, t)
    }

    pub fn zeros(&mut self, module: &str, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(module, name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, module: &str, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(module, name, Tensor::full(rows, cols, 1.0))
    }

    pub fn tensor(&mut self, module: &str, name: &str, value: Tensor) -> ParamId {
        self.store.add(module, name, value)
    }
}
