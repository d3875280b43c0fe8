//! Binary checkpoint format.
//!
//! Layout: magic `TRGE`, format version (u32 LE), metadata length
//! (u64 LE), UTF-8 JSON metadata, then every tensor's elements raw in
//! little-endian IEEE-754, concatenated in manifest order. The manifest
//! inside the metadata lists each tensor's name, shape, dtype, and byte
//! offset into the payload region, so a reader can locate any tensor
//! without decoding the rest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerError, TensorEntry};
use crate::encoder::{EncoderConfig, EncoderParams, Scalar};
use crate::training::TrainingError;

impl From<ContainerError> for TrainingError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic => TrainingError::BadMagic,
            ContainerError::Version(v) => TrainingError::VersionUnsupported(v),
            ContainerError::Mismatch(m) => TrainingError::ManifestMismatch(m),
        }
    }
}

pub const MAGIC: [u8; 4] = *b"TRGE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moment estimates for both encoders, with their update counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F: Scalar> {
    pub t_h: u64,
    pub t_p: u64,
    pub m_h: EncoderParams<F>,
    pub v_h: EncoderParams<F>,
    pub m_p: EncoderParams<F>,
    pub v_p: EncoderParams<F>,
}

/// A complete training snapshot: both encoder parameter sets, optionally
/// the optimizer moments (needed to resume, not to fine-tune), and enough
/// bookkeeping to reproduce the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub header_config: EncoderConfig,
    pub payload_config: EncoderConfig,
    pub theta_h: EncoderParams<F>,
    pub theta_p: EncoderParams<F>,
    pub moments: Option<Moments<F>>,
    pub step: u64,
    pub base_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    header_config: EncoderConfig,
    payload_config: EncoderConfig,
    step: u64,
    base_seed: u64,
    /// Adam update counters (header, payload); present iff moments are.
    adam_t: Option<(u64, u64)>,
    tensors: Vec<TensorEntry>,
}

/// Tensor groups in serialization order, each dumped in the stable
/// per-parameter-set manifest order.
fn groups<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<(&'static str, &EncoderParams<F>)> {
    let mut g = vec![("theta_h", &ckpt.theta_h), ("theta_p", &ckpt.theta_p)];
    if let Some(m) = &ckpt.moments {
        g.push(("adam.m_h", &m.m_h));
        g.push(("adam.v_h", &m.v_h));
        g.push(("adam.m_p", &m.m_p));
        g.push(("adam.v_p", &m.v_p));
    }
    g
}

pub fn save_checkpoint<F: Scalar>(
    ckpt: &Checkpoint<F>,
    path: impl AsRef<Path>,
) -> Result<(), TrainingError> {
    let groups = groups(ckpt);
    let mut views = Vec::new();
    for (prefix, params) in &groups {
        for (name, view) in params.tensor_views() {
            views.push((format!("{prefix}/{name}"), view));
        }
    }
    let meta = Metadata {
        header_config: ckpt.header_config.clone(),
        payload_config: ckpt.payload_config.clone(),
        step: ckpt.step,
        base_seed: ckpt.base_seed,
        adam_t: ckpt.moments.as_ref().map(|m| (m.t_h, m.t_p)),
        tensors: container::manifest_for(&views),
    };
    let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    fs::write(path, container::encode(MAGIC, CHECKPOINT_VERSION, &json, &views))?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>, TrainingError> {
    let data = fs::read(path)?;
    let (meta_bytes, payload) = container::split(&data, MAGIC, CHECKPOINT_VERSION)?;
    let meta: Metadata = serde_json::from_slice(meta_bytes)
        .map_err(|e| TrainingError::ManifestMismatch(format!("metadata is not valid JSON: {e}")))?;

    meta.header_config
        .validate()
        .map_err(|e| TrainingError::ManifestMismatch(format!("header config: {e}")))?;
    meta.payload_config
        .validate()
        .map_err(|e| TrainingError::ManifestMismatch(format!("payload config: {e}")))?;

    let mut theta_h = EncoderParams::<F>::zeros(&meta.header_config);
    let mut theta_p = EncoderParams::<F>::zeros(&meta.payload_config);
    let mut moments = meta.adam_t.map(|(t_h, t_p)| Moments {
        t_h,
        t_p,
        m_h: EncoderParams::<F>::zeros(&meta.header_config),
        v_h: EncoderParams::<F>::zeros(&meta.header_config),
        m_p: EncoderParams::<F>::zeros(&meta.payload_config),
        v_p: EncoderParams::<F>::zeros(&meta.payload_config),
    });

    {
        let mut groups: Vec<(&'static str, &mut EncoderParams<F>)> =
            vec![("theta_h", &mut theta_h), ("theta_p", &mut theta_p)];
        if let Some(m) = moments.as_mut() {
            groups.push(("adam.m_h", &mut m.m_h));
            groups.push(("adam.v_h", &mut m.v_h));
            groups.push(("adam.m_p", &mut m.m_p));
            groups.push(("adam.v_p", &mut m.v_p));
        }
        let mut targets = Vec::new();
        for (prefix, params) in groups {
            for (name, view) in params.tensor_views_mut() {
                targets.push((format!("{prefix}/{name}"), view));
            }
        }
        container::fill_tensors(payload, &meta.tensors, targets)?;
    }

    Ok(Checkpoint {
        header_config: meta.header_config,
        payload_config: meta.payload_config,
        theta_h,
        theta_p,
        moments,
        step: meta.step,
        base_seed: meta.base_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Precision;
    use crate::masking::MaskSeed;

    fn cfg(precision: Precision) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 64,
            max_len: 8,
            hidden: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            precision,
        }
    }

    fn sample<F: Scalar>(precision: Precision, with_moments: bool) -> Checkpoint<F> {
        let hc = cfg(precision);
        let pc = EncoderConfig { max_len: 6, ..cfg(precision) };
        let theta_h = EncoderParams::<F>::init(&hc, &mut MaskSeed::new(1, 2, 3).rng());
        let theta_p = EncoderParams::<F>::init(&pc, &mut MaskSeed::new(4, 5, 6).rng());
        let moments = with_moments.then(|| {
            let mut m_h = theta_h.zeros_like();
            m_h.token_embedding.fill(crate::encoder::s(0.25));
            Moments {
                t_h: 17,
                t_p: 11,
                m_h,
                v_h: theta_h.zeros_like(),
                m_p: theta_p.zeros_like(),
                v_p: theta_p.zeros_like(),
            }
        });
        Checkpoint {
            header_config: hc,
            payload_config: pc,
            theta_h,
            theta_p,
            moments,
            step: 123,
            base_seed: 99,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_with_and_without_moments() {
        let dir = tempfile::tempdir().unwrap();
        for with_moments in [false, true] {
            let ckpt = sample::<f32>(Precision::F32, with_moments);
            let path = dir.path().join(format!("m{with_moments}.trge"));
            save_checkpoint(&ckpt, &path).unwrap();
            let loaded = load_checkpoint::<f32>(&path).unwrap();
            assert_eq!(loaded, ckpt);
        }
        let ckpt = sample::<f64>(Precision::F64, true);
        let path = dir.path().join("f64.trge");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), ckpt);
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample::<f32>(Precision::F32, true);
        let a = dir.path().join("a.trge");
        let b = dir.path().join("b.trge");
        save_checkpoint(&ckpt, &a).unwrap();
        save_checkpoint(&ckpt, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn foreign_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gguf");
        fs::write(&path, b"GGUF\x03\x00\x00\x00rest-of-some-other-format").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(TrainingError::BadMagic)));
        // A file shorter than the magic is equally not a checkpoint.
        fs::write(&path, b"TR").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(TrainingError::BadMagic)));
    }

    #[test]
    fn unknown_version_is_rejected_with_the_version_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v99.trge");
        let ckpt = sample::<f32>(Precision::F32, false);
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(TrainingError::VersionUnsupported(99))
        ));
    }

    #[test]
    fn truncated_payload_is_a_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.trge");
        let ckpt = sample::<f32>(Precision::F32, false);
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(TrainingError::ManifestMismatch(_))));
    }

    #[test]
    fn trailing_garbage_is_a_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pad.trge");
        let ckpt = sample::<f32>(Precision::F32, false);
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(TrainingError::ManifestMismatch(_))));
    }

    #[test]
    fn dtype_mismatch_is_a_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.trge");
        save_checkpoint(&sample::<f32>(Precision::F32, false), &path).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        match err {
            TrainingError::ManifestMismatch(msg) => {
                assert!(msg.contains("f32") && msg.contains("f64"), "unhelpful message: {msg}");
            }
            other => panic!("expected ManifestMismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_metadata_is_a_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad-json.trge");
        save_checkpoint(&sample::<f32>(Precision::F32, false), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[16] = b'!';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(TrainingError::ManifestMismatch(_))));

        // Declared metadata length pointing past EOF.
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..16].copy_from_slice(&(u64::MAX).to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(TrainingError::ManifestMismatch(_))));
    }
}
