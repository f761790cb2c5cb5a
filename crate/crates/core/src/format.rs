//! Binary container shared by the checkpoint, mask and task-vector files.
//!
//! Layout on disk:
//!
//! ```text
//! magic (5 ASCII bytes) | header length (u32 LE) | header (UTF-8 JSON) | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"TLSP1";
pub const MASK_MAGIC: &[u8; 5] = b"TMSK1";
pub const VECTOR_MAGIC: &[u8; 5] = b"TVEC1";

pub fn encode<H: Serialize>(magic: &[u8; 5], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode<'a, H: DeserializeOwned>(magic: &[u8; 5], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 9 {
        return Err(Error::Format("file too short for header".into()));
    }
    if &bytes[..5] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..5]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let end = 9usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header = serde_json::from_slice(&bytes[9..end])?;
    Ok((header, &bytes[end..]))
}

pub fn write_file<H: Serialize>(
    path: &Path,
    magic: &[u8; 5],
    header: &H,
    payload: &[u8],
) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
