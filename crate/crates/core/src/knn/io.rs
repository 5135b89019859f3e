//! Index files.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "LTAUIDX1"
//! 8       1           kind: 0 = flat, 1 = hnsw
//! 9       4           header length H (u32 le)
//! 13      H           JSON header {version, kind, n, dim, seed?, params?, entry_point?, max_level?}
//! 13+H    4*n*dim     descriptors, f32 le, row-major
//! -- hnsw only --
//!         n           level of each node (u8)
//!         ...         per node, per layer 0..=level: count (u32 le) then count ids (u32 le)
//! ```
//!
//! Readers reject trailing bytes, so truncation and padding both surface as errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hnsw::MAX_LEVEL;
use super::{FlatIndex, HnswIndex, HnswParams, VectorIndex};
use crate::error::{Error, Result};
use crate::trajlog::DescriptorSet;

pub const INDEX_MAGIC: &[u8; 8] = b"LTAUIDX1";
pub const INDEX_VERSION: u32 = 1;

const KIND_FLAT: u8 = 0;
const KIND_HNSW: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    n: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<HnswParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entry_point: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_level: Option<usize>,
}

pub fn serialize_index(index: &VectorIndex) -> Vec<u8> {
    let desc = index.descriptors();
    let (kind, header) = match index {
        VectorIndex::Flat(_) => (
            KIND_FLAT,
            Header {
                version: INDEX_VERSION,
                kind: "flat".into(),
                n: desc.len(),
                dim: desc.dim(),
                seed: None,
                params: None,
                entry_point: None,
                max_level: None,
            },
        ),
        VectorIndex::Hnsw(h) => (
            KIND_HNSW,
            Header {
                version: INDEX_VERSION,
                kind: "hnsw".into(),
                n: desc.len(),
                dim: desc.dim(),
                seed: Some(h.seed),
                params: Some(h.params),
                entry_point: Some(h.entry_point),
                max_level: Some(h.max_level),
            },
        ),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(13 + json.len() + desc.as_slice().len() * 4);
    out.extend_from_slice(INDEX_MAGIC);
    out.push(kind);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for x in desc.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let VectorIndex::Hnsw(h) = index {
        out.extend_from_slice(&h.levels);
        for layers in &h.links {
            for list in layers {
                out.extend_from_slice(&(list.len() as u32).to_le_bytes());
                for id in list {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: wanted {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn deserialize_index(bytes: &[u8]) -> Result<VectorIndex> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != INDEX_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let kind = r.take(1)?[0];
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.version != INDEX_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: INDEX_VERSION,
        });
    }
    let expected_kind = match kind {
        KIND_FLAT => "flat",
        KIND_HNSW => "hnsw",
        other => return Err(Error::Format(format!("unknown index kind byte {other}"))),
    };
    if header.kind != expected_kind {
        return Err(Error::Format("kind byte disagrees with header".into()));
    }
    let count = header
        .n
        .checked_mul(header.dim)
        .filter(|c| c.checked_mul(4).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| Error::Format("header shape exceeds file size".into()))?;
    let vectors: Vec<f32> = r
        .take(count * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let desc = DescriptorSet::new(header.n, header.dim, vectors)?;

    let index = match kind {
        KIND_FLAT => VectorIndex::Flat(FlatIndex::build(desc)?),
        _ => {
            let missing = || Error::Format("hnsw header missing graph fields".into());
            let params = header.params.ok_or_else(missing)?;
            let levels = r.take(header.n)?.to_vec();
            if levels.iter().any(|&l| l as usize > MAX_LEVEL) {
                return Err(Error::Format("node level out of range".into()));
            }
            let mut links = Vec::with_capacity(header.n);
            for &level in &levels {
                let mut layers = Vec::with_capacity(level as usize + 1);
                for layer in 0..=level as usize {
                    let len = r.u32()? as usize;
                    if len > params.capacity(layer) {
                        return Err(Error::Format("neighbor list exceeds degree cap".into()));
                    }
                    let mut list = Vec::with_capacity(len);
                    for _ in 0..len {
                        list.push(r.u32()?);
                    }
                    layers.push(list);
                }
                links.push(layers);
            }
            let h = HnswIndex {
                params,
                seed: header.seed.ok_or_else(missing)?,
                descriptors: desc,
                levels,
                links,
                entry_point: header.entry_point.ok_or_else(missing)?,
                max_level: header.max_level.ok_or_else(missing)?,
            };
            h.validate()?;
            VectorIndex::Hnsw(h)
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(index)
}

pub fn write_index(path: &Path, index: &VectorIndex) -> Result<()> {
    fs::write(path, serialize_index(index)).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<VectorIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize_index(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_hnsw() -> VectorIndex {
        let rows: Vec<[f32; 3]> = (0..200)
            .map(|i| {
                let t = i as f32 * 0.1;
                [t.sin(), t.cos(), (t * 0.3).sin()]
            })
            .collect();
        let d = DescriptorSet::from_rows(&rows).unwrap();
        let params = HnswParams {
            m: 4,
            ef_construction: 16,
            ef_search: 8,
        };
        VectorIndex::Hnsw(HnswIndex::build(d, params, 42).unwrap())
    }

    #[test]
    fn hnsw_round_trip() {
        let idx = sample_hnsw();
        let bytes = serialize_index(&idx);
        let back = deserialize_index(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(serialize_index(&back), bytes);
    }

    #[test]
    fn flat_round_trip() {
        let d = DescriptorSet::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        let idx = VectorIndex::Flat(FlatIndex::build(d).unwrap());
        assert_eq!(deserialize_index(&serialize_index(&idx)).unwrap(), idx);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = serialize_index(&sample_hnsw());
        bytes[0] = b'X';
        assert!(matches!(deserialize_index(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch() {
        let bytes = serialize_index(&sample_hnsw());
        let text = String::from_utf8_lossy(&bytes[13..]).into_owned();
        assert!(text.starts_with("{\"version\":1"));
        let mut patched = bytes.clone();
        patched[13 + "{\"version\":".len()] = b'7';
        assert!(matches!(
            deserialize_index(&patched),
            Err(Error::Version {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncation_and_padding_are_rejected() {
        let bytes = serialize_index(&sample_hnsw());
        assert!(deserialize_index(&bytes[..bytes.len() - 3]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(deserialize_index(&padded).is_err());
    }

    #[test]
    fn out_of_range_neighbor_is_rejected() {
        let idx = sample_hnsw();
        let mut bytes = serialize_index(&idx);
        // The last four bytes are a neighbor id of the final node.
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&10_000u32.to_le_bytes());
        assert!(matches!(deserialize_index(&bytes), Err(Error::Format(_))));
    }
}
