//! Shared binary envelope for parameter files.
//!
//! Layout: a 4-byte magic, format version (u32 LE), metadata length
//! (u64 LE), UTF-8 JSON metadata carrying a tensor manifest, then every
//! tensor's elements raw in little-endian IEEE-754, concatenated in
//! manifest order. Each file format supplies its own magic, version, and
//! metadata struct; this module owns the envelope and the strict
//! manifest-against-targets validation both formats share.

use ndarray::{ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::encoder::Scalar;

/// One manifest row: where a named tensor lives in the payload region.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// Envelope-level failures; each format maps these onto its own error type
/// so messages can name the format.
#[derive(Debug)]
pub(crate) enum ContainerError {
    BadMagic,
    Version(u32),
    Mismatch(String),
}

/// Manifest rows for `views`, in order, with contiguous offsets.
pub(crate) fn manifest_for<F: Scalar>(views: &[(String, ArrayViewD<'_, F>)]) -> Vec<TensorEntry> {
    let mut offset = 0u64;
    views
        .iter()
        .map(|(name, view)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: view.shape().to_vec(),
                dtype: F::DTYPE.to_string(),
                offset,
            };
            offset += (view.len() * F::WIDTH) as u64;
            entry
        })
        .collect()
}

/// Serialize a complete container file into memory.
pub(crate) fn encode<F: Scalar>(
    magic: [u8; 4],
    version: u32,
    metadata_json: &[u8],
    views: &[(String, ArrayViewD<'_, F>)],
) -> Vec<u8> {
    let payload_len: usize = views.iter().map(|(_, v)| v.len() * F::WIDTH).sum();
    let mut out = Vec::with_capacity(16 + metadata_json.len() + payload_len);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(metadata_json.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata_json);
    for (_, view) in views {
        for &x in view.iter() {
            x.write_le(&mut out);
        }
    }
    out
}

/// Check magic and version and bound the metadata region, returning the
/// metadata and payload slices.
pub(crate) fn split(
    data: &[u8],
    magic: [u8; 4],
    version: u32,
) -> Result<(&[u8], &[u8]), ContainerError> {
    if data.len() < 4 || data[0..4] != magic {
        return Err(ContainerError::BadMagic);
    }
    if data.len() < 16 {
        return Err(ContainerError::Mismatch("file ends inside the fixed header".into()));
    }
    let found = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(ContainerError::Version(found));
    }
    let meta_len = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes"));
    let payload_start = 16u64
        .checked_add(meta_len)
        .filter(|&end| end <= data.len() as u64)
        .ok_or_else(|| {
            ContainerError::Mismatch(format!(
                "declared metadata length {meta_len} exceeds file size {}",
                data.len()
            ))
        })? as usize;
    Ok((&data[16..payload_start], &data[payload_start..]))
}

/// Copy the payload into `targets`, insisting the manifest matches them row
/// for row: same names in the same order, same shapes, same dtype,
/// contiguous offsets, and a payload with no missing or extra bytes.
pub(crate) fn fill_tensors<F: Scalar>(
    payload: &[u8],
    entries: &[TensorEntry],
    targets: Vec<(String, ArrayViewMutD<'_, F>)>,
) -> Result<(), ContainerError> {
    let n_targets = targets.len();
    let mut offset = 0u64;
    for (idx, (full, mut view)) in targets.into_iter().enumerate() {
        let entry = entries.get(idx).ok_or_else(|| {
            ContainerError::Mismatch(format!(
                "manifest ends at {idx} tensors but the configs define more (next: {full})"
            ))
        })?;
        if entry.name != full {
            return Err(ContainerError::Mismatch(format!(
                "tensor {idx} is named {} but {full} was expected",
                entry.name
            )));
        }
        if entry.shape != view.shape() {
            return Err(ContainerError::Mismatch(format!(
                "{full} has shape {:?} but the config requires {:?}",
                entry.shape,
                view.shape()
            )));
        }
        if entry.dtype != F::DTYPE {
            return Err(ContainerError::Mismatch(format!(
                "{full} was saved as {} but the loader expects {}",
                entry.dtype,
                F::DTYPE
            )));
        }
        if entry.offset != offset {
            return Err(ContainerError::Mismatch(format!(
                "{full} declares offset {} but {offset} bytes precede it",
                entry.offset
            )));
        }
        let nbytes = view.len() * F::WIDTH;
        let end = offset as usize + nbytes;
        if end > payload.len() {
            return Err(ContainerError::Mismatch(format!(
                "payload truncated: {full} needs bytes up to {end} but only {} are present",
                payload.len()
            )));
        }
        let bytes = &payload[offset as usize..end];
        for (x, chunk) in view.iter_mut().zip(bytes.chunks_exact(F::WIDTH)) {
            *x = F::read_le(chunk);
        }
        offset = end as u64;
    }
    if n_targets != entries.len() {
        return Err(ContainerError::Mismatch(format!(
            "manifest declares {} tensors but the configs define only {n_targets}",
            entries.len()
        )));
    }
    if offset as usize != payload.len() {
        return Err(ContainerError::Mismatch(format!(
            "payload holds {} bytes but the manifest accounts for {offset}",
            payload.len()
        )));
    }
    Ok(())
}
