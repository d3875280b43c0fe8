//! Byte-pair tokenization over a closed vocabulary.
//!
//! Every token is one pair of consecutive bytes, taken non-overlapping with
//! stride 2; an odd trailing byte is zero-padded into a final pair. The
//! vocabulary is closed-form: five special tokens followed by all 65536
//! byte pairs, so no vocabulary file is ever learned or loaded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Padding token, also the only id whose attention bit is 0.
pub const PAD: u32 = 0;
/// Mask token substituted at planned positions during pre-training.
pub const MASK: u32 = 1;
/// Sequence-initial classification token.
pub const CLS: u32 = 2;
/// Separator token (reserved; never produced by [`tokenize_bytes`]).
pub const SEP: u32 = 3;
/// Unknown token (reserved; the byte-pair vocabulary is total).
pub const UNK: u32 = 4;
/// First byte-pair id: `id(b1, b2) = BYTE_PAIR_BASE + b1 * 256 + b2`.
pub const BYTE_PAIR_BASE: u32 = 5;
/// Total vocabulary size: 5 specials + 65536 byte pairs.
pub const VOCAB_SIZE: usize = 5 + 65536;

/// Token id of the byte pair `(b1, b2)`.
#[inline]
pub fn pair_id(b1: u8, b2: u8) -> u32 {
    BYTE_PAIR_BASE + (b1 as u32) * 256 + (b2 as u32)
}

/// Inverse of [`pair_id`]. Returns `None` for special tokens.
#[inline]
pub fn id_to_pair(id: u32) -> Option<(u8, u8)> {
    if id < BYTE_PAIR_BASE || id >= VOCAB_SIZE as u32 {
        return None;
    }
    let n = id - BYTE_PAIR_BASE;
    Some(((n / 256) as u8, (n % 256) as u8))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    /// The sequence contains MASK or UNK and cannot be mapped back to bytes.
    #[error("sequence is not invertible: contains {0}")]
    NotInvertible(&'static str),
}

/// A fixed-length token sequence with its attention mask.
///
/// `ids[0]` is CLS whenever the sequence is non-empty, content tokens
/// follow, and the tail is PAD. `attn[i] == 1` exactly when `ids[i] != PAD`,
/// and `real_len` counts the non-PAD positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attn: Vec<u8>,
    pub real_len: usize,
}

impl TokenSequence {
    /// Sequence length including padding.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices that may be masked: everything except CLS and PAD.
    pub fn maskable_count(&self) -> usize {
        self.real_len.saturating_sub(1)
    }
}

/// Tokenize a byte string into a fixed-length sequence of `max_len` ids.
///
/// The result is `[CLS]` followed by the non-overlapping byte pairs of
/// `data` (an odd trailing byte is paired with 0x00), truncated to
/// `max_len` and right-padded with PAD.
///
/// Panics if `max_len < 2`.
pub fn tokenize_bytes(data: &[u8], max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must be at least 2, got {max_len}");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for chunk in data.chunks(2) {
        if ids.len() == max_len {
            break;
        }
        let b1 = chunk[0];
        let b2 = if chunk.len() == 2 { chunk[1] } else { 0 };
        ids.push(pair_id(b1, b2));
    }
    let real_len = ids.len();
    ids.resize(max_len, PAD);
    let attn = ids.iter().map(|&id| u8::from(id != PAD)).collect();
    TokenSequence { ids, attn, real_len }
}

/// Map a token sequence back to bytes, dropping special tokens.
///
/// Inverse of [`tokenize_bytes`] up to the odd-byte zero-padding. Fails
/// with [`TokenizeError::NotInvertible`] if the sequence contains MASK or
/// UNK.
pub fn detokenize(seq: &TokenSequence) -> Result<Vec<u8>, TokenizeError> {
    let mut out = Vec::with_capacity(seq.ids.len() * 2);
    for &id in &seq.ids {
        match id {
            MASK => return Err(TokenizeError::NotInvertible("MASK")),
            UNK => return Err(TokenizeError::NotInvertible("UNK")),
            PAD | CLS | SEP => continue,
            _ => {
                let (b1, b2) = id_to_pair(id).expect("non-special id in range");
                out.push(b1);
                out.push(b2);
            }
        }
    }
    Ok(out)
}
