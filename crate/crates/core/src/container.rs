//! The `ECMT1` binary container.
//!
//! Layout: the six magic bytes `ECMT1\n`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then raw little-endian `f64` arrays
//! concatenated in the order of the header's `manifest` list. Each manifest
//! entry is `{"name": …, "shape": […]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const MAGIC: &[u8; 6] = b"ECMT1\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Serializes `header` (a JSON object) plus named arrays. The `manifest`
/// key is filled in from `arrays`.
pub fn encode(mut header: Value, arrays: &[(String, &Array)]) -> Result<Vec<u8>> {
    let manifest: Vec<ManifestEntry> = arrays
        .iter()
        .map(|(name, a)| ManifestEntry { name: name.clone(), shape: a.shape().to_vec() })
        .collect();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::format("container header must be a JSON object"))?;
    obj.insert("manifest".into(), serde_json::to_value(manifest)?);
    let header_bytes = serde_json::to_vec(&header)?;
    let payload: usize = arrays.iter().map(|(_, a)| a.numel() * 8).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_bytes.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, a) in arrays {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Array)>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("missing ECMT1 magic"));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[6..14]);
    let header_len = u64::from_le_bytes(len_bytes);
    let header_end = 14u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format("header length exceeds file size"))? as usize;
    let header: Value = serde_json::from_slice(&bytes[14..header_end])
        .map_err(|e| Error::format(format!("header is not valid JSON: {e}")))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_value(
        header.get("manifest").cloned().ok_or_else(|| Error::format("header has no manifest"))?,
    )
    .map_err(|e| Error::format(format!("bad manifest: {e}")))?;

    let mut offset = header_end;
    let mut arrays = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(format!("shape of `{}` overflows", entry.name)))?;
        let end = numel
            .checked_mul(8)
            .and_then(|n| n.checked_add(offset))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(format!("array `{}` is truncated", entry.name)))?;
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = Array::new(entry.shape, data).map_err(|e| Error::format(e.to_string()))?;
        arrays.push((entry.name, array));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after arrays", bytes.len() - offset)));
    }
    Ok((header, arrays))
}

pub fn write(path: &Path, header: Value, arrays: &[(String, &Array)]) -> Result<()> {
    fs::write(path, encode(header, arrays)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Value, Vec<(String, Array)>)> {
    decode(&fs::read(path)?)
}
