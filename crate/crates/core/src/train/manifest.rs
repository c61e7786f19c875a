//! Run manifest and content hashes tying artifacts to their configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LmRecord, RunRecord};
use crate::error::{Error, Result};
use crate::model::HeadLayout;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of a configuration value.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    // serde_json maps are ordered, so this rendering is canonical
    let text = serde_json::to_string(&value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub seed: u64,
    pub layout: HeadLayout,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// `STL`, `LM+STL`, `MTL` or `LM+MTL`.
    pub environment: String,
    pub lm_stage: bool,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub vocab_hash: String,
    /// The resolved configuration the run used.
    pub config: serde_json::Value,
    pub checkpoints: Vec<CheckpointEntry>,
    pub eval_history: Vec<RunRecord>,
    pub lm_history: Vec<LmRecord>,
    /// Prediction files written by the run, relative to the manifest.
    pub predictions: Vec<String>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
