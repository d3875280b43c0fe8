//! Network-traffic representation learning from raw packet captures.
//!
//! The pipeline runs in three stages:
//!
//! 1. **Ingest** ([`ingest`]): parse classic PCAP files, split every packet
//!    into header and payload byte strings, and group packets into
//!    bidirectional flows keyed by the canonical 5-tuple.
//! 2. **Pre-train** ([`training`]): two independent transformer encoders are
//!    trained with masked-language-modeling objectives — field-level
//!    geometric span masking on header sequences and uniform random masking
//!    on payload sequences, with masks regenerated every step.
//! 3. **Fine-tune** ([`classify`]): packet representations (the two CLS
//!    vectors, concatenated) are averaged over the first packets of a flow
//!    and classified by a small MLP + softmax head.
//!
//! [`tokenize`] converts byte strings into fixed-length token sequences over
//! a closed byte-pair vocabulary, [`masking`] produces the per-step mask
//! plans, and [`encoder`] holds the transformer with exact reverse-mode
//! gradients. [`synth`] generates labeled synthetic corpora used by the
//! test-suite and the demo data generator.

pub mod classify;
pub(crate) mod container;
pub mod encoder;
pub mod ingest;
pub mod masking;
pub mod synth;
pub mod tokenize;
pub mod training;
