//! FMAP v1: a little-endian container for dense patch-feature grids.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FMAP"
//! 4       2     version (1)
//! 6       2     reserved (0)
//! 8       4     grid_h
//! 12      4     grid_w
//! 16      4     dim
//! 20      4     patch_size
//! 24      ...   grid_h * grid_w * dim f32, cell-major then channel
//! ```

use std::path::Path;

use super::DenseFeatureMap;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode_fmap(map: &DenseFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [map.grid_h(), map.grid_w(), map.dim(), map.patch_size()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fmap(bytes: &[u8]) -> Result<DenseFeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::FeatureFormat(format!(
            "truncated header: need {HEADER_LEN} bytes, got {} ({} missing)",
            bytes.len(),
            HEADER_LEN - bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::FeatureFormat(format!(
            "bad magic {:?}, expected \"FMAP\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::FeatureFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let reserved = u16_at(6);
    if reserved != 0 {
        return Err(Error::FeatureFormat(format!(
            "reserved field is {reserved}, expected 0"
        )));
    }
    let (grid_h, grid_w, dim, patch_size) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    if grid_h == 0 || grid_w == 0 || dim == 0 || patch_size == 0 {
        return Err(Error::FeatureFormat(format!(
            "zero-sized header field (grid {grid_h}x{grid_w}, dim {dim}, patch {patch_size})"
        )));
    }
    let count = grid_h
        .checked_mul(grid_w)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::FeatureFormat("header dimensions overflow".into()))?;
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::FeatureFormat("header dimensions overflow".into()))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::FeatureFormat(format!(
            "truncated payload: need {payload} bytes, got {available} ({} missing)",
            payload - available
        )));
    }
    if available > payload {
        return Err(Error::FeatureFormat(format!(
            "{} trailing bytes after payload",
            available - payload
        )));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::FeatureFormat(format!(
            "non-finite value at cell {}, channel {}",
            i / dim,
            i % dim
        )));
    }
    DenseFeatureMap::new(grid_h, grid_w, dim, patch_size, values)
        .map_err(|e| Error::FeatureFormat(e.to_string()))
}

pub fn load_feature_file(path: &Path) -> Result<DenseFeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmap(&bytes)
}

/// Writes to a sibling temp file and renames it into place.
pub fn store_feature_file(map: &DenseFeatureMap, path: &Path) -> Result<()> {
    let tmp = path.with_extension("fmap.tmp");
    std::fs::write(&tmp, encode_fmap(map)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
