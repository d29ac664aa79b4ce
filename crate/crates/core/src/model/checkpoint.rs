//! Checkpoint format: the 8-byte magic `CLABCKP1`, a little-endian `u64`
//! header length, a UTF-8 JSON header (model config, optional metadata and
//! a tensor directory of name/shape/byte offset), then raw little-endian
//! `f32` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_shapes, Model, ModelConfig};
use crate::error::{LabError, Result};
use crate::io_util::atomic_write;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLABCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let names = param_shapes(&model.config);
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(model.params.len());
    for ((name, _), p) in names.iter().zip(&model.params) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += 4 * p.len() as u64;
    }
    let header = Header {
        config: model.config.clone(),
        metadata: model.metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(LabError::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| LabError::BadHeader("missing header length".into()))?
        .try_into()
        .expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| LabError::BadHeader(format!("header of {header_len} bytes runs past end of file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| LabError::BadHeader(e.to_string()))?;
    header.config.validate()?;
    let data = &bytes[header_end..];

    let expected = param_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(LabError::BadHeader(format!(
            "config implies {} tensors, directory lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut params = Vec::with_capacity(expected.len());
    let mut consumed = 0usize;
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(LabError::TensorShape {
                name: entry.name.clone(),
                expected: shape.clone(),
                got: entry.shape.clone(),
            });
        }
        let declared: usize = shape.iter().product();
        let start = entry.offset as usize;
        let available = data.len().saturating_sub(start) / 4;
        if available < declared {
            return Err(LabError::TruncatedTensor {
                name: name.clone(),
                declared,
                available,
            });
        }
        let values = data[start..start + 4 * declared]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor::new(shape.clone(), values)?);
        consumed = consumed.max(start + 4 * declared);
    }
    if consumed != data.len() {
        return Err(LabError::BadHeader(format!(
            "directory covers {consumed} data bytes but the file holds {}",
            data.len()
        )));
    }
    let mut model = Model::from_params(header.config, params)?;
    model.metadata = header.metadata;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, &write_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&std::fs::read(path)?)
}
