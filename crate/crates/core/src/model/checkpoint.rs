use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

/// Writes `manifest.json` and `params/<name>.bin` (little-endian f64) under
/// `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir)?;
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(pdir.join(format!("{name}.bin")), bytes)?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ParamStore)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut store = ParamStore::new();
    for e in manifest.params {
        let bytes = fs::read(dir.join("params").join(format!("{}.bin", e.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{}: truncated data", e.name)));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        store.insert(&e.name, t.with_requires_grad(e.trainable));
    }
    Ok((manifest.config, store))
}
