//! Binary checkpoint format.
//!
//! Layout: the magic bytes `NATCKPT1`, a little-endian `u64` byte length, a
//! UTF-8 JSON manifest of that length, then every tensor listed in the
//! manifest as raw little-endian `f64` values, in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{Model, ModelConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::{EulerOrder, GraphType};

pub const MAGIC: &[u8; 8] = b"NATCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub euler: EulerOrder,
    pub graph: GraphType,
    pub alpha: f64,
    pub beta: f64,
    /// Training hyperparameters, free-form.
    pub hyperparameters: serde_json::Value,
    pub frozen: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus the metadata stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub euler: EulerOrder,
    pub hyperparameters: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            euler: EulerOrder::default(),
            hyperparameters: serde_json::Value::Null,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let p = &self.model.params;
        let entry = |role| {
            move |(path, t): (&String, &Tensor)| TensorEntry {
                path: path.clone(),
                shape: t.shape().to_vec(),
                role,
            }
        };
        let mut tensors: Vec<TensorEntry> = p.params().iter().map(entry(TensorRole::Param)).collect();
        tensors.extend(p.buffers().iter().map(entry(TensorRole::Buffer)));
        let cfg = &self.model.config;
        Manifest {
            config: cfg.clone(),
            euler: self.euler,
            graph: cfg.graph,
            alpha: cfg.alpha,
            beta: cfg.beta,
            hyperparameters: self.hyperparameters.clone(),
            frozen: p.frozen().cloned().collect(),
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let manifest = serde_json::to_vec(&self.manifest()).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let p = &self.model.params;
        for t in p.params().values().chain(p.buffers().values()) {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let corrupt = |what: &str| Error::Data(format!("checkpoint: {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| corrupt("truncated header"))?;
        let len = u64::from_le_bytes(len);
        let mut manifest = Vec::new();
        (&mut r)
            .take(len)
            .read_to_end(&mut manifest)
            .map_err(|_| corrupt("unreadable manifest"))?;
        if manifest.len() as u64 != len {
            return Err(corrupt("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&manifest)?;

        let mut store = ParamStore::new();
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| corrupt(&format!("truncated tensor {}", entry.path)))?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            match entry.role {
                TensorRole::Param => store.insert_param(entry.path.clone(), t),
                TensorRole::Buffer => store.insert_buffer(entry.path.clone(), t),
            }
        }
        if r.read(&mut [0u8; 1]).map_err(|_| corrupt("unreadable trailer"))? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        for path in &manifest.frozen {
            store.freeze(path)?;
        }
        let expected = Model::new(manifest.config.clone())?;
        if !same_layout(&expected.params, &store) {
            return Err(corrupt("tensors do not match the model configuration"));
        }
        Ok(Checkpoint {
            model: Model::from_parts(manifest.config, store)?,
            euler: manifest.euler,
            hyperparameters: manifest.hyperparameters,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    let shapes = |m: &std::collections::BTreeMap<String, Tensor>| -> Vec<(String, Vec<usize>)> {
        m.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    };
    shapes(a.params()) == shapes(b.params()) && shapes(a.buffers()) == shapes(b.buffers())
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
