//! Checkpoint container.
//!
//! Layout: the 8-byte magic `FEALLMCK`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor's values as little-endian
//! `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{FeallmModel, ModelConfig};
use super::tokenizer::Tokenizer;
use super::trainer::StageRecord;
use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"FEALLMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: Tokenizer,
    pub provenance: Vec<StageRecord>,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FeallmModel,
    pub provenance: Vec<StageRecord>,
    pub seed: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            vocabulary: self.model.tokenizer.clone(),
            provenance: self.provenance.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.model.params.total_elements() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in self.model.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(Error::Parse("checkpoint manifest is truncated".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint format {} is not supported",
                manifest.format_version
            )));
        }
        let mut params = ParamStore::new();
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(&entry.name, entry.group, Tensor::new(entry.shape.clone(), data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes after tensors", r.len())));
        }
        params.set_trainable_groups(&[]);
        let model = FeallmModel::from_parts(manifest.config, manifest.vocabulary, params)?;
        Ok(Self {
            model,
            provenance: manifest.provenance,
            seed: manifest.seed,
            config_hash: manifest.config_hash,
        })
    }

    /// Written to a temporary sibling and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Parse("checkpoint is truncated".into()))
}
