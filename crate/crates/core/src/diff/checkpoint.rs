//! `MCLNER01` container: 8-byte magic, little-endian `u64` length of a UTF-8
//! JSON header, the header, then every tensor as little-endian `f32` in
//! header order.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MCLNER01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
}

pub fn to_bytes(params: &ParamStore<f32>, config: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing MCLNER01 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let data = &bytes[16 + hlen..];
    if data.len() != total * 4 {
        return Err(bad(format!(
            "expected {} bytes of tensor data, found {}",
            total * 4,
            data.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let values: Vec<f32> = floats.by_ref().take(n).collect();
        store
            .add(entry.name, Tensor::new(entry.shape, values)?)
            .map_err(|e| bad(e.to_string()))?;
    }
    Ok((store, header.config))
}

/// Loads `bytes` and checks that names and shapes match `expected`.
pub fn load_into(bytes: &[u8], expected: &mut ParamStore<f32>) -> Result<serde_json::Value> {
    let (store, config) = from_bytes(bytes)?;
    if store.names() != expected.names() {
        return Err(Error::Checkpoint(format!(
            "tensor names differ from the model layout ({} vs {} tensors)",
            store.len(),
            expected.len()
        )));
    }
    for ((name, a), (_, b)) in store.iter().zip(expected.iter()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    expected.copy_from(&store)?;
    Ok(config)
}
