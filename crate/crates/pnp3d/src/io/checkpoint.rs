//! Flat binary container of named f64 tensors.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..8    u64: byte length H of the JSON header
//! bytes 8..8+H  UTF-8 JSON: {"format":"pnp3d-checkpoint-v1",
//!                            "tensors":[{"name":..,"shape":[..],"offset":..}, ..]}
//! bytes 8+H..   payload: each tensor's values as consecutive f64
//! ```
//!
//! `offset` is the byte position of a tensor's first value inside the
//! payload; values are row-major. Entry order in the header matches the
//! order tensors were saved in, so identical inputs produce identical
//! files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const FORMAT_TAG: &str = "pnp3d-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<HeaderEntry>,
}

/// Serializes named tensors; names must be unique.
pub fn to_bytes(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, tensor) in tensors {
        if entries.iter().any(|e: &HeaderEntry| e.name == *name) {
            return Err(Error::Integrity(format!(
                "duplicate tensor name \"{name}\" in checkpoint"
            )));
        }
        entries.push(HeaderEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += (tensor.numel() * 8) as u64;
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT_TAG.into(),
        tensors: entries,
    })
    .expect("header serialization");

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, tensor) in tensors {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 8 {
        return Err(Error::Parse {
            line: 1,
            message: "checkpoint shorter than its length prefix".into(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Parse {
            line: 1,
            message: "checkpoint header extends past end of file".into(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| {
        Error::Parse {
            line: 1,
            message: format!("bad checkpoint header: {e}"),
        }
    })?;
    if header.format != FORMAT_TAG {
        return Err(Error::Parse {
            line: 1,
            message: format!("unknown checkpoint format \"{}\"", header.format),
        });
    }

    let payload = &bytes[header_end..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(Error::Parse {
                line: 1,
                message: format!("tensor \"{}\" extends past the payload", entry.name),
            });
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, to_bytes(tensors)?).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}
