//! A small pre-norm transformer encoder with a masked-token prediction
//! head and exact hand-written reverse-mode gradients.
//!
//! Two independent instances are trained in this pipeline: one over header
//! token sequences and one over payload token sequences. The model is
//! generic over `f32`/`f64`: f64 exists for gradient checking and
//! trace-replay tests, production runs are f32.
//!
//! Forward structure per layer (pre-norm residual blocks):
//!
//! ```text
//! a  = layernorm1(x)            s  = softmax(Q Kᵀ / √d_h + key mask)
//! x' = x + Wo·(s·V) + bo        m  = layernorm2(x')
//! y  = x' + W2·gelu(W1·m + b1) + b2
//! ```
//!
//! followed by a final layer norm. The prediction head is a `d×d`
//! transform + GELU + layer norm, projected onto the vocabulary through
//! the transposed token embedding (weight tying) plus an output bias.

mod backward;
mod forward;
pub mod gradcheck;
mod math;
mod params;

pub use backward::{backward, backward_from_hidden};
pub use forward::{encode, encode_batch, mlm_forward, mlm_logits, Dropout, ForwardTrace, MaskedToken, MlmTrace};
pub use math::{dgelu, gelu, mlm_loss, MlmLoss};
pub(crate) use math::fill_truncated_normal;
pub use params::{EncoderParams, LayerParams, MlmHead};

use crate::tokenize::VOCAB_SIZE;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no masked positions in the batch")]
    EmptyBatch,
}

/// Numeric element type the model can run in. The checkpoint format
/// records which one a tensor was saved with.
pub trait Scalar: ndarray::NdFloat + std::iter::Sum<Self> {
    const DTYPE: &'static str;
    /// Serialized width in bytes of one element.
    const WIDTH: usize;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode one element from exactly `WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("caller slices exactly WIDTH bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("caller slices exactly WIDTH bytes"))
    }
}

/// Cast a finite f64 constant into the active scalar type.
pub(crate) fn s<F: Scalar>(x: f64) -> F {
    F::from(x).expect("finite f64 representable in any supported float")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Architecture hyperparameters for one encoder instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Dropout probability used when a forward pass runs in train mode;
    /// evaluation always runs with dropout 0.
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            max_len: 128,
            hidden: 64,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }
}

impl EncoderConfig {
    /// Feed-forward inner width, fixed at 4× the hidden size.
    pub fn ffn_dim(&self) -> usize {
        self.hidden * 4
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(EncoderError::ShapeMismatch(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(EncoderError::ShapeMismatch(format!(
                "max_len {} below minimum of 2",
                self.max_len
            )));
        }
        if self.vocab_size <= crate::tokenize::UNK as usize {
            return Err(EncoderError::ShapeMismatch(format!(
                "vocab size {} cannot hold the reserved tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::ShapeMismatch(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod config_tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_full_vocab() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.vocab_size, 65_541);
        assert_eq!(cfg.ffn_dim(), 256);
        assert_eq!(cfg.head_dim(), 32);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = EncoderConfig { heads: 3, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { max_len: 1, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { dropout: 1.0, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
    }
}
