//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `CMTLCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header describing the encoder
//! config, head layout, tensor names and shapes, and free-form metadata, and
//! then the raw little-endian `f64` data of every tensor in header order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, HeadLayout, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CMTLCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EncoderConfig,
    pub layout: HeadLayout,
    pub has_mlm: bool,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, metadata: &BTreeMap<String, String>) -> Result<()> {
    let named = params.named_params();
    let header = CheckpointHeader {
        config: params.config.clone(),
        layout: params.layout(),
        has_mlm: params.mlm.is_some(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let total: usize = named.iter().map(|(_, t)| t.numel()).sum();
    let mut bytes = Vec::with_capacity(20 + header_json.len() + total * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, t) in &named {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
    let header: CheckpointHeader = serde_json::from_slice(take(&bytes, &mut pos, header_len as usize)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut stored: HashMap<String, Tensor> = HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&bytes, &mut pos, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        stored.insert(entry.name.clone(), Tensor::parameter(data, &entry.shape)?);
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }

    let mut params = ModelParams::init(&header.config, header.layout, header.has_mlm, 0)?;
    let mut slots = params.named_params_mut();
    if slots.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            slots.len(),
            stored.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let t = stored
            .remove(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    drop(slots);
    Ok((params, header))
}
