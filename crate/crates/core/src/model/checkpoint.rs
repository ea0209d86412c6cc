//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic `FSSLCKPT`, `u32` format version, `u64` header
//! length, a JSON header, then every parameter and buffer tensor in header
//! order as little-endian scalars.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bundle::{ModelBundle, ModelConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::permset::PermutationSet;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"FSSLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PermsetRecord {
    source: Option<String>,
    n: usize,
    perms: Vec<Vec<usize>>,
    min_hamming: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    train_config: serde_json::Value,
    step: usize,
    best_val_accuracy: Option<f64>,
    permset: Option<PermsetRecord>,
    params: Vec<TensorSpec>,
    buffers: Vec<TensorSpec>,
}

/// Trained model plus the metadata needed to reproduce its evaluation.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub bundle: ModelBundle<T>,
    /// Echo of the training configuration.
    pub train_config: serde_json::Value,
    pub step: usize,
    pub best_val_accuracy: Option<f64>,
    pub permset: Option<PermutationSet>,
    pub permset_source: Option<String>,
}

fn specs<T: Scalar>(store: &ParamStore<T>) -> Vec<TensorSpec> {
    store
        .tensors()
        .iter()
        .map(|t| TensorSpec {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.bundle.config().clone(),
            train_config: self.train_config.clone(),
            step: self.step,
            best_val_accuracy: self.best_val_accuracy,
            permset: self.permset.as_ref().map(|p| PermsetRecord {
                source: self.permset_source.clone(),
                n: p.n_elements(),
                perms: p.perms().to_vec(),
                min_hamming: p.min_hamming(),
            }),
            params: specs(self.bundle.params()),
            buffers: specs(self.bundle.buffers()),
        };
        let header = serde_json::to_vec(&header)?;
        let numel = self.bundle.params().numel() + self.bundle.buffers().numel();
        let mut out = Vec::with_capacity(20 + header.len() + numel * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for store in [self.bundle.params(), self.bundle.buffers()] {
            for t in store.tensors() {
                for &v in &t.data {
                    v.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::parse("checkpoint header", &e))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {} values but {} was requested",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut bundle = ModelBundle::<T>::new(header.model.clone(), 0)?;
        let mut cursor = 20 + header_len;
        let mut read_store = |layout: &ParamStore<T>, recorded: &[TensorSpec]| -> Result<ParamStore<T>> {
            if recorded != specs(layout).as_slice() {
                return Err(fail("tensor list does not match the recorded model configuration"));
            }
            let mut store = ParamStore::new();
            for spec in recorded {
                let n: usize = spec.shape.iter().product();
                let end = cursor + n * T::BYTES;
                let raw = bytes.get(cursor..end).ok_or_else(|| fail("truncated tensor data"))?;
                let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
                store.add(spec.name.clone(), spec.shape.clone(), data);
                cursor = end;
            }
            Ok(store)
        };
        let params = read_store(bundle.params(), &header.params)?;
        let buffers = read_store(bundle.buffers(), &header.buffers)?;
        if cursor != bytes.len() {
            return Err(fail("trailing bytes after tensor data"));
        }
        bundle.load_state(params, buffers)?;
        let permset = header
            .permset
            .as_ref()
            .map(|p| {
                let set = PermutationSet::from_perms(p.perms.clone())?;
                if set.min_hamming() != p.min_hamming || set.n_elements() != p.n {
                    return Err(fail("embedded permutation set is inconsistent"));
                }
                Ok(set)
            })
            .transpose()?;
        Ok(Self {
            bundle,
            train_config: header.train_config,
            step: header.step,
            best_val_accuracy: header.best_val_accuracy,
            permset,
            permset_source: header.permset.and_then(|p| p.source),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and insists that the stored architecture equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.bundle.config() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} was trained with {:?}, expected {:?}",
                path.display(),
                ckpt.bundle.config(),
                expected
            )));
        }
        Ok(ckpt)
    }

    /// Short content hash identifying this checkpoint.
    pub fn id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(hex::encode(&digest[..8]))
    }
}
