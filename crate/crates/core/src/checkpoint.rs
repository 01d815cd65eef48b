//! Model checkpoints: one JSON header line, then every tensor as little-endian `f64`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "rbx-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint shape mismatch for {name}: file has {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint payload has {found} bytes, header implies {expected}")]
    Payload { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
}

pub fn encode(kind: &str, meta: serde_json::Value, tensors: &[(TensorInfo, &[f64])]) -> Vec<u8> {
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        meta,
        tensors: tensors.iter().map(|(t, _)| t.clone()).collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (info, data) in tensors {
        assert_eq!(info.len(), data.len(), "tensor {} length", info.name);
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint, checking the format, kind and tensor shapes.
pub fn decode(
    bytes: &[u8],
    kind: &str,
    expected: &[TensorInfo],
) -> Result<(Header, Vec<Vec<f64>>), CheckpointError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Header(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    if header.kind != kind {
        return Err(CheckpointError::Header(format!(
            "checkpoint holds a {} model, expected {kind}",
            header.kind
        )));
    }
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::Header(format!(
            "{} tensors in file, model has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (found, want) in header.tensors.iter().zip(expected) {
        if found.name != want.name || found.shape != want.shape {
            return Err(CheckpointError::Shape {
                name: want.name.clone(),
                expected: want.shape.clone(),
                found: found.shape.clone(),
            });
        }
    }
    let payload = &bytes[newline + 1..];
    let total: usize = expected.iter().map(TensorInfo::len).sum();
    if payload.len() != total * 8 {
        return Err(CheckpointError::Payload {
            expected: total * 8,
            found: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = expected
        .iter()
        .map(|t| values.by_ref().take(t.len()).collect())
        .collect();
    Ok((header, tensors))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}
