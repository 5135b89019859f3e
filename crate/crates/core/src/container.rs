//! Raw matrix container: a row-major little-endian payload file plus a JSON
//! sidecar at `<payload>.json` describing its shape.
//!
//! ```text
//! train.errs        E*N*4 bytes, f32le, row-major
//! train.errs.json   {"rows":E,"cols":N,"dtype":"f32le","kind":"errs"}
//! ```
//!
//! Bin grids travel in the sidecar as decimal strings so the f64 edges
//! survive the round trip bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::F64Le => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub kind: String,
    /// Logical tensor shape when the payload is more than two-dimensional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<String>>,
}

impl Sidecar {
    pub fn new(kind: &str, rows: usize, cols: usize, dtype: Dtype) -> Self {
        Sidecar {
            rows,
            cols,
            dtype,
            kind: kind.to_string(),
            shape: None,
            spacing: None,
            edges: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.into_iter().map(f64::from).collect(),
            Payload::F64(v) => v,
        }
    }

    /// Narrowing is lossy for f64 payloads.
    pub fn into_f32(self) -> Vec<f32> {
        match self {
            Payload::F32(v) => v,
            Payload::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_f32(path: &Path, meta: &Sidecar, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_raw(path, meta, Dtype::F32Le, data.len(), &bytes)
}

pub fn write_f64(path: &Path, meta: &Sidecar, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_raw(path, meta, Dtype::F64Le, data.len(), &bytes)
}

fn write_raw(path: &Path, meta: &Sidecar, dtype: Dtype, len: usize, bytes: &[u8]) -> Result<()> {
    if meta.dtype != dtype {
        return Err(Error::invalid("sidecar dtype does not match payload type"));
    }
    if meta.rows * meta.cols != len {
        return Err(Error::Shape(format!(
            "sidecar says {}x{} but payload has {} values",
            meta.rows, meta.cols, len
        )));
    }
    let json = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: side,
        reason: e.to_string(),
    })
}

/// Reads a container, checking that the sidecar `kind` matches when given.
pub fn read(path: &Path, expected_kind: Option<&str>) -> Result<(Sidecar, Payload)> {
    let meta = read_sidecar(path)?;
    if let Some(kind) = expected_kind {
        if meta.kind != kind {
            return Err(Error::Metadata {
                path: sidecar_path(path),
                reason: format!("expected kind {kind:?}, found {:?}", meta.kind),
            });
        }
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (meta.rows as u64) * (meta.cols as u64) * meta.dtype.width() as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let payload = match meta.dtype {
        Dtype::F32Le => Payload::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64Le => Payload::F64(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok((meta, payload))
}

pub(crate) fn encode_edges(edges: &[f64]) -> Vec<String> {
    // `{:?}` on f64 is the shortest string that parses back to the same bits.
    edges.iter().map(|e| format!("{e:?}")).collect()
}

pub(crate) fn decode_edges(path: &Path, raw: &[String]) -> Result<Vec<f64>> {
    raw.iter()
        .map(|s| {
            s.parse::<f64>().map_err(|e| Error::Metadata {
                path: sidecar_path(path),
                reason: format!("bad bin edge {s:?}: {e}"),
            })
        })
        .collect()
}
