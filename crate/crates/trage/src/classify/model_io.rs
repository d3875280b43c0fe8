//! On-disk format for fine-tuned classifiers.
//!
//! Same envelope as training checkpoints — magic, version, JSON metadata
//! with a tensor manifest, raw little-endian tensor payload — under a
//! different magic (`TRGC`), because the files are not interchangeable:
//! this one carries both encoders plus the classification head and no
//! optimizer state.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use super::finetune::{ClassifierHead, FinetunedModel};
use super::ClassifyError;
use crate::container::{self, ContainerError, TensorEntry};
use crate::encoder::{EncoderConfig, EncoderParams, Scalar};

pub const MODEL_MAGIC: [u8; 4] = *b"TRGC";
pub const MODEL_VERSION: u32 = 1;

impl From<ContainerError> for ClassifyError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic => ClassifyError::BadMagic,
            ContainerError::Version(v) => ClassifyError::VersionUnsupported(v),
            ContainerError::Mismatch(m) => ClassifyError::ManifestMismatch(m),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMetadata {
    header_config: EncoderConfig,
    payload_config: EncoderConfig,
    n_max_packets: usize,
    /// Output classes; fixes the shapes of the head's `w2` and `b2`.
    classes: usize,
    /// Width of the head's hidden layer.
    head_hidden: usize,
    tensors: Vec<TensorEntry>,
}

/// Tensor names and views in serialization order: both encoders in their
/// stable per-parameter-set order, then the four head tensors.
fn model_views<F: Scalar>(model: &FinetunedModel<F>) -> Vec<(String, ArrayViewD<'_, F>)> {
    let mut views = Vec::new();
    for (prefix, params) in [("theta_h", &model.theta_h), ("theta_p", &model.theta_p)] {
        for (name, view) in params.tensor_views() {
            views.push((format!("{prefix}/{name}"), view));
        }
    }
    views.push(("head/w1".into(), model.head.w1.view().into_dyn()));
    views.push(("head/b1".into(), model.head.b1.view().into_dyn()));
    views.push(("head/w2".into(), model.head.w2.view().into_dyn()));
    views.push(("head/b2".into(), model.head.b2.view().into_dyn()));
    views
}

pub fn save_model<F: Scalar>(
    model: &FinetunedModel<F>,
    path: impl AsRef<Path>,
) -> Result<(), ClassifyError> {
    let views = model_views(model);
    let meta = ModelMetadata {
        header_config: model.header_config.clone(),
        payload_config: model.payload_config.clone(),
        n_max_packets: model.n_max_packets,
        classes: model.head.classes(),
        head_hidden: model.head.b1.len(),
        tensors: container::manifest_for(&views),
    };
    let json = serde_json::to_vec(&meta).expect("model metadata serializes");
    fs::write(path, container::encode(MODEL_MAGIC, MODEL_VERSION, &json, &views))?;
    Ok(())
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<FinetunedModel<F>, ClassifyError> {
    let data = fs::read(path)?;
    let (meta_bytes, payload) = container::split(&data, MODEL_MAGIC, MODEL_VERSION)?;
    let meta: ModelMetadata = serde_json::from_slice(meta_bytes)
        .map_err(|e| ClassifyError::ManifestMismatch(format!("metadata is not valid JSON: {e}")))?;

    meta.header_config
        .validate()
        .map_err(|e| ClassifyError::ManifestMismatch(format!("header config: {e}")))?;
    meta.payload_config
        .validate()
        .map_err(|e| ClassifyError::ManifestMismatch(format!("payload config: {e}")))?;
    if meta.classes < 2 {
        return Err(ClassifyError::ManifestMismatch(format!(
            "model declares {} output class(es); at least 2 are required",
            meta.classes
        )));
    }
    if meta.head_hidden == 0 {
        return Err(ClassifyError::ManifestMismatch("head hidden width is zero".into()));
    }
    if meta.n_max_packets == 0 {
        return Err(ClassifyError::ManifestMismatch("packets-per-flow limit is zero".into()));
    }

    let input_dim = meta.header_config.hidden + meta.payload_config.hidden;
    let mut model = FinetunedModel {
        theta_h: EncoderParams::<F>::zeros(&meta.header_config),
        theta_p: EncoderParams::<F>::zeros(&meta.payload_config),
        head: ClassifierHead {
            w1: Array2::zeros((input_dim, meta.head_hidden)),
            b1: Array1::zeros(meta.head_hidden),
            w2: Array2::zeros((meta.head_hidden, meta.classes)),
            b2: Array1::zeros(meta.classes),
        },
        header_config: meta.header_config,
        payload_config: meta.payload_config,
        n_max_packets: meta.n_max_packets,
    };

    {
        let mut targets: Vec<(String, ArrayViewMutD<'_, F>)> = Vec::new();
        for (prefix, params) in [("theta_h", &mut model.theta_h), ("theta_p", &mut model.theta_p)] {
            for (name, view) in params.tensor_views_mut() {
                targets.push((format!("{prefix}/{name}"), view));
            }
        }
        targets.push(("head/w1".into(), model.head.w1.view_mut().into_dyn()));
        targets.push(("head/b1".into(), model.head.b1.view_mut().into_dyn()));
        targets.push(("head/w2".into(), model.head.w2.view_mut().into_dyn()));
        targets.push(("head/b2".into(), model.head.b2.view_mut().into_dyn()));
        container::fill_tensors(payload, &meta.tensors, targets)?;
    }

    Ok(model)
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

    fn sample<F: Scalar>(precision: Precision) -> FinetunedModel<F> {
        let hc = cfg(precision);
        let pc = EncoderConfig { max_len: 6, hidden: 4, ..cfg(precision) };
        let theta_h = EncoderParams::<F>::init(&hc, &mut MaskSeed::new(1, 2, 3).rng());
        let theta_p = EncoderParams::<F>::init(&pc, &mut MaskSeed::new(4, 5, 6).rng());
        let head =
            ClassifierHead::<F>::init(hc.hidden + pc.hidden, 16, 3, &mut MaskSeed::new(7, 8, 9).rng());
        FinetunedModel {
            header_config: hc,
            payload_config: pc,
            theta_h,
            theta_p,
            head,
            n_max_packets: 5,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_in_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample::<f32>(Precision::F32);
        let path = dir.path().join("model.trgc");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model::<f32>(&path).unwrap(), model);

        let model = sample::<f64>(Precision::F64);
        let path = dir.path().join("model64.trgc");
        save_model(&model, &path).unwrap();
        assert_eq!(load_model::<f64>(&path).unwrap(), model);
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let model = sample::<f32>(Precision::F32);
        let a = dir.path().join("a.trgc");
        let b = dir.path().join("b.trgc");
        save_model(&model, &a).unwrap();
        save_model(&model, &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn checkpoint_files_are_not_models_and_vice_versa() {
        let dir = tempfile::tempdir().unwrap();

        // A pre-training checkpoint (TRGE) must not load as a classifier.
        let ckpt_path = dir.path().join("pretrain.trge");
        fs::write(&ckpt_path, b"TRGE\x01\x00\x00\x00rest-does-not-matter").unwrap();
        assert!(matches!(load_model::<f32>(&ckpt_path), Err(ClassifyError::BadMagic)));

        // A classifier model must not load as a pre-training checkpoint.
        let model_path = dir.path().join("model.trgc");
        save_model(&sample::<f32>(Precision::F32), &model_path).unwrap();
        assert!(matches!(
            crate::training::load_checkpoint::<f32>(&model_path),
            Err(crate::training::TrainingError::BadMagic)
        ));
    }

    #[test]
    fn unknown_version_is_rejected_with_the_version_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v7.trgc");
        save_model(&sample::<f32>(Precision::F32), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(ClassifyError::VersionUnsupported(7))));
    }

    #[test]
    fn truncated_or_padded_payload_is_a_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.trgc");
        save_model(&sample::<f32>(Precision::F32), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(ClassifyError::ManifestMismatch(_))));

        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0u8; 3]);
        fs::write(&path, padded).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(ClassifyError::ManifestMismatch(_))));
    }

    #[test]
    fn dtype_mismatch_is_a_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.trgc");
        save_model(&sample::<f32>(Precision::F32), &path).unwrap();
        match load_model::<f64>(&path).unwrap_err() {
            ClassifyError::ManifestMismatch(msg) => {
                assert!(msg.contains("f32") && msg.contains("f64"), "unhelpful message: {msg}");
            }
            other => panic!("expected ManifestMismatch, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one-class.trgc");
        save_model(&sample::<f32>(Precision::F32), &path).unwrap();
        // The sample head has 3 classes; claim 1 without moving any bytes.
        let mut bytes = fs::read(&path).unwrap();
        let needle = b"\"classes\":3";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("metadata contains the class count");
        bytes[pos..pos + needle.len()].copy_from_slice(b"\"classes\":1");
        fs::write(&path, bytes).unwrap();
        match load_model::<f32>(&path).unwrap_err() {
            ClassifyError::ManifestMismatch(msg) => {
                assert!(msg.contains("at least 2"), "unhelpful message: {msg}");
            }
            other => panic!("expected ManifestMismatch, got {other:?}"),
        }
    }
}
