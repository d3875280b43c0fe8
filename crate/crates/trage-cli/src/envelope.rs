//! Metadata peek for `inspect`: reads the common artifact envelope
//! (magic, version, JSON metadata) without decoding tensor payloads, so a
//! dump works regardless of the file's numeric precision.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

pub struct Envelope {
    pub magic: [u8; 4],
    pub version: u32,
    pub metadata: Value,
    /// Bytes of raw tensor payload following the metadata.
    pub payload_len: usize,
}

pub fn peek(path: &Path) -> Result<Envelope> {
    let data =
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    if data.len() < 16 {
        bail!("{} is too short to be a trage artifact", path.display());
    }
    let magic: [u8; 4] = data[0..4].try_into().expect("4 bytes");
    if &magic != b"TRGE" && &magic != b"TRGC" {
        bail!(
            "{} does not start with a known artifact magic (TRGE checkpoint or TRGC model)",
            path.display()
        );
    }
    let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    let meta_len = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes"));
    let end = 16u64.checked_add(meta_len).filter(|&e| e <= data.len() as u64).with_context(
        || format!("{}: declared metadata length {meta_len} exceeds the file", path.display()),
    )? as usize;
    let metadata: Value = serde_json::from_slice(&data[16..end])
        .with_context(|| format!("{}: metadata is not valid JSON", path.display()))?;
    Ok(Envelope { magic, version, metadata, payload_len: data.len() - end })
}
