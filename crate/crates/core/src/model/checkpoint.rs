//! Checkpoint container.
//!
//! Layout: magic `NFTVG1` (6 bytes), manifest length as u64 LE, the UTF-8 JSON
//! manifest, then every parameter as raw f64 LE values. Manifest offsets are
//! relative to the first byte after the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 6] = b"NFTVG1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn total_params(&self) -> usize {
        self.params.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut offset = 0u64;
    let params = store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { params }).expect("manifest serializes");
    let mut out = Vec::with_capacity(14 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + len).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        msg: format!("truncated {what}: need {len} bytes at offset {at}, file has {}", bytes.len()),
    })
}

/// Parses the header and manifest; returns the manifest and the data offset.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if take(bytes, 0, 6, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad checkpoint magic".into(),
        });
    }
    let len = u64::from_le_bytes(take(bytes, 6, 8, "manifest length")?.try_into().expect("8 bytes")) as usize;
    let raw = take(bytes, 14, len, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(raw).map_err(|e| Error::Format {
        offset: 14,
        msg: format!("manifest: {e}"),
    })?;
    Ok((manifest, 14 + len))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let (manifest, base) = decode_manifest(bytes)?;
    manifest
        .params
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let start = base + e.offset as usize;
            let raw = take(bytes, start, 8 * n, &format!("parameter `{}`", e.name))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| Error::Format {
                offset: start as u64,
                msg: format!("parameter `{}`: {err}", e.name),
            })?;
            Ok((e.name, t))
        })
        .collect()
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
