//! Named-tensor archive: magic, JSON header, raw little-endian payload.
//!
//! ```text
//! b"IDKTARCH" | u64 LE header length | header JSON | tensor bytes
//! ```
//!
//! The header carries caller metadata plus a `tensors` index of
//! `{name, shape, offset}` entries; offsets are relative to the start of the
//! payload. The payload length is implied by the index, so a short file is
//! detected before any tensor is returned.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::NamedTensors;

pub const MAGIC: &[u8; 8] = b"IDKTARCH";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor archive (bad magic)")]
    BadMagic,
    #[error("archive truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("malformed archive header: {0}")]
    Header(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    tensors: Vec<TensorEntry>,
    #[serde(flatten)]
    meta: Map<String, Value>,
}

pub fn write_archive(
    path: &Path,
    meta: Map<String, Value>,
    tensors: &NamedTensors,
    dtype: DType,
) -> Result<(), ArchiveError> {
    let io = |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            offset: payload.len() as u64,
        });
        for &x in t.iter() {
            match dtype {
                DType::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    let header = Header {
        dtype,
        tensors: entries,
        meta,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ArchiveError::Header(e.to_string()))?;

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    f.write_all(&header_bytes).map_err(io)?;
    f.write_all(&payload).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

/// Read an archive back as `(metadata, tensors)`.
pub fn read_archive(path: &Path) -> Result<(Map<String, Value>, NamedTensors), ArchiveError> {
    let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_archive(&bytes)
}

pub fn decode_archive(bytes: &[u8]) -> Result<(Map<String, Value>, NamedTensors), ArchiveError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(bytes) {
            ArchiveError::Truncated {
                expected: 16,
                actual,
            }
        } else {
            ArchiveError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(ArchiveError::Truncated {
            expected: 16,
            actual,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = 16u64.saturating_add(header_len);
    if actual < payload_start {
        return Err(ArchiveError::Truncated {
            expected: payload_start,
            actual,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start as usize])
        .map_err(|e| ArchiveError::Header(e.to_string()))?;

    let width = header.dtype.width() as u64;
    let expected = header
        .tensors
        .iter()
        .map(|e| e.offset + (e.shape[0] * e.shape[1]) as u64 * width)
        .max()
        .unwrap_or(0)
        + payload_start;
    if actual < expected {
        return Err(ArchiveError::Truncated { expected, actual });
    }

    let payload = &bytes[payload_start as usize..];
    let mut tensors = NamedTensors::new();
    for e in &header.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let data: Vec<f64> = match header.dtype {
            DType::F32 => payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), data)
            .map_err(|err| ArchiveError::Header(format!("{}: {err}", e.name)))?;
        tensors.insert(e.name.clone(), t);
    }
    Ok((header.meta, tensors))
}
