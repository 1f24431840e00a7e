//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! blob per named parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
}

/// SHA-256 of the canonical JSON encoding of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("model config serialises");
    hex::encode(Sha256::digest(bytes))
}

pub fn save(dir: &Path, config: &ModelConfig, params: &ParamStore, step: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("{name}.f32");
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(config),
        step,
        model: config.clone(),
        params: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read a checkpoint, checking every blob against its manifest shape.
pub fn load(dir: &Path) -> Result<(Manifest, ParamStore)> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::malformed(&path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.config_hash != config_hash(&manifest.model) {
        return Err(Error::Checkpoint(
            "config hash does not match the stored model config".into(),
        ));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let blob = dir.join(&e.file);
        if !blob.exists() {
            return Err(Error::MissingFile(blob));
        }
        let bytes = fs::read(&blob)?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, shape {:?} needs {}",
                e.file,
                bytes.len(),
                e.shape,
                n * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect();
        store.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
    }
    Ok((manifest, store))
}

/// Load a checkpoint and build its model, verifying that the stored
/// parameters are exactly those the model expects.
pub fn load_model(dir: &Path) -> Result<(Model, ParamStore, Manifest)> {
    let (manifest, store) = load(dir)?;
    let model = Model::new(manifest.model.clone())?;
    let expected = model.init_params();
    for (name, t) in expected.iter() {
        match store.get(name) {
            None => return Err(Error::Checkpoint(format!("parameter `{name}` missing"))),
            Some(s) if s.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = store.names().find(|n| !expected.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok((model, store, manifest))
}
