//! Header-payload differentiated pre-training.
//!
//! Every step draws fresh mask plans (field-level spans for headers,
//! uniform random for payloads), runs one masked-recovery forward/backward
//! on each encoder, and applies two completely independent Adam updates:
//! the header model θ_H never sees payload gradients and vice versa.
//!
//! All randomness — parameter init, mask plans, dropout — is derived from
//! `PretrainConfig::seed` through keyed streams, so a run is a pure
//! function of (seed, corpus order, config).

pub mod adam;
pub mod checkpoint;

pub use adam::{clip_global_norm, scheduled_lr, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Moments, CHECKPOINT_VERSION};

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    backward, encode_batch, mlm_forward, s, Dropout, EncoderConfig, EncoderError, EncoderParams,
    MaskedToken, Scalar,
};
use crate::ingest::PacketRecord;
use crate::masking::{
    apply_mask, plan_field_mask, plan_random_mask, GeometricSampler, MaskPlan, MaskSeed,
};
use crate::tokenize::{tokenize_bytes, TokenSequence};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("corpus contains no packets")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("not a checkpoint: file does not start with the TRGE magic")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    VersionUnsupported(u32),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pre-training hyperparameters. The optimizer itself is fixed: Adam with
/// β₁ 0.9, β₂ 0.999, ε 1e−8, linear warmup over the first 1% of steps and
/// a constant rate after, gradients clipped to global norm 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Optimizer steps. Desk-scale default; 100_000 is the full-scale
    /// setting this implementation is too small to need.
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of maskable tokens hidden per sequence per step.
    pub mask_ratio: f64,
    /// Success probability of the geometric span-length distribution used
    /// by field-level masking.
    pub geometric_p: f64,
    /// Redraw mask plans every step; `false` pins every sequence to its
    /// step-0 plan.
    pub dynamic_masking: bool,
    /// Mask headers with field-level spans; `false` is the ablation that
    /// masks headers with the payload-style uniform scheme instead.
    pub field_level_header: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 32,
            mask_ratio: 0.15,
            geometric_p: 0.7,
            dynamic_masking: true,
            field_level_header: true,
            seed: 42,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.steps == 0 {
            return Err(TrainingError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch_size must be at least 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(TrainingError::Config(format!(
                "mask_ratio must be in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.geometric_p > 0.0 && self.geometric_p <= 1.0) {
            return Err(TrainingError::Config(format!(
                "geometric_p must be in (0, 1], got {}",
                self.geometric_p
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainingError::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

// Keyed seed streams. Mask plans use the real step number in the `step`
// slot of [`MaskSeed`]; these reserved tags sit at the top of the u64 range
// where no step counter ever reaches, so the streams cannot collide.
const INIT_STREAM_HEADER: u64 = u64::MAX;
const INIT_STREAM_PAYLOAD: u64 = u64::MAX - 1;
const DROPOUT_STREAM_HEADER: u64 = u64::MAX - 2;
const DROPOUT_STREAM_PAYLOAD: u64 = u64::MAX - 3;

/// Everything that evolves during pre-training: both parameter sets, their
/// optimizer moments, and the step counter.
#[derive(Debug, Clone)]
pub struct PretrainState<F: Scalar> {
    /// Completed optimizer steps.
    pub step: usize,
    pub theta_h: EncoderParams<F>,
    pub theta_p: EncoderParams<F>,
    pub adam_h: AdamState<F>,
    pub adam_p: AdamState<F>,
}

impl<F: Scalar> PretrainState<F> {
    /// Fresh state at step 0, parameters drawn from seed-keyed init
    /// streams (header and payload models start from different draws).
    pub fn init(cfg: &PretrainConfig, header_cfg: &EncoderConfig, payload_cfg: &EncoderConfig) -> Self {
        let mut rng_h = MaskSeed::new(cfg.seed, INIT_STREAM_HEADER, 0).rng();
        let mut rng_p = MaskSeed::new(cfg.seed, INIT_STREAM_PAYLOAD, 0).rng();
        let theta_h = EncoderParams::init(header_cfg, &mut rng_h);
        let theta_p = EncoderParams::init(payload_cfg, &mut rng_p);
        let adam_h = AdamState::new(&theta_h);
        let adam_p = AdamState::new(&theta_p);
        Self { step: 0, theta_h, theta_p, adam_h, adam_p }
    }
}

/// One sequence of a training batch together with its stable stream index,
/// which keys the per-sequence mask-plan stream.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub sequence_id: u64,
    pub seq: &'a TokenSequence,
}

/// The mask plan the header side draws for `seq` at `step`. Field-level
/// spans normally; the ablation flag swaps in the uniform random scheme,
/// same seed stream.
pub fn plan_header_mask(
    cfg: &PretrainConfig,
    seq: &TokenSequence,
    sequence_id: u64,
    step: usize,
) -> MaskPlan {
    let seed = mask_seed(cfg, sequence_id, step);
    if cfg.field_level_header {
        let sampler = GeometricSampler::new(cfg.geometric_p);
        plan_field_mask(seq, &sampler, cfg.mask_ratio, seed)
    } else {
        plan_random_mask(seq, cfg.mask_ratio, seed)
    }
}

/// The mask plan the payload side draws for `seq` at `step`: always the
/// uniform random scheme.
pub fn plan_payload_mask(
    cfg: &PretrainConfig,
    seq: &TokenSequence,
    sequence_id: u64,
    step: usize,
) -> MaskPlan {
    plan_random_mask(seq, cfg.mask_ratio, mask_seed(cfg, sequence_id, step))
}

fn mask_seed(cfg: &PretrainConfig, sequence_id: u64, step: usize) -> MaskSeed {
    if cfg.dynamic_masking {
        MaskSeed::new(cfg.seed, step as u64, sequence_id)
    } else {
        MaskSeed::without_step(cfg.seed, sequence_id)
    }
}

enum Side {
    Header,
    Payload,
}

/// Mask one batch, run forward/backward, clip, and apply one Adam update
/// to the given parameters. Returns the mean per-token recovery loss.
#[allow(clippy::too_many_arguments)]
fn side_step<F: Scalar>(
    params: &mut EncoderParams<F>,
    adam: &mut AdamState<F>,
    enc_cfg: &EncoderConfig,
    batch: &[BatchItem<'_>],
    side: Side,
    cfg: &PretrainConfig,
    step: usize,
) -> Result<f64, TrainingError> {
    let mut masked_seqs = Vec::with_capacity(batch.len());
    let mut tokens = Vec::new();
    for (b, item) in batch.iter().enumerate() {
        let plan = match side {
            Side::Header => plan_header_mask(cfg, item.seq, item.sequence_id, step),
            Side::Payload => plan_payload_mask(cfg, item.seq, item.sequence_id, step),
        };
        let (masked, targets) =
            apply_mask(item.seq, &plan).expect("planned positions lie inside the sequence");
        tokens.extend(
            targets.into_iter().map(|(pos, target)| MaskedToken { batch: b, pos, target }),
        );
        masked_seqs.push(masked);
    }

    let dropout_stream = match side {
        Side::Header => DROPOUT_STREAM_HEADER,
        Side::Payload => DROPOUT_STREAM_PAYLOAD,
    };
    let mut drop_rng = MaskSeed::new(cfg.seed, dropout_stream, step as u64).rng();
    let dropout = (enc_cfg.dropout > 0.0).then_some(Dropout { p: enc_cfg.dropout, rng: &mut drop_rng });

    let trace = encode_batch(params, enc_cfg, &masked_seqs, dropout)?;
    let mlm = mlm_forward(params, &trace, &tokens)?;
    let loss = mlm.loss.mean.to_f64().expect("loss fits in f64");

    // Gradient of the mean loss, clipped to global norm 1.0.
    let scale = s::<F>(1.0 / mlm.loss.count as f64);
    let mut grads = backward(params, enc_cfg, &trace, &mlm, scale);
    clip_global_norm(&mut grads, 1.0);
    adam.step(params, &grads, scheduled_lr(cfg.lr, step, cfg.steps));
    Ok(loss)
}

/// One pre-training step: a field-masked update of θ_H on the header batch
/// and, when a payload batch is present, a random-masked update of θ_P on
/// it. The two updates share nothing. Returns the mean per-token losses;
/// `loss_rm` is `None` when the payload batch is empty (header-only
/// corpus).
pub fn pretrain_step<F: Scalar>(
    state: &mut PretrainState<F>,
    cfg: &PretrainConfig,
    header_cfg: &EncoderConfig,
    payload_cfg: &EncoderConfig,
    header_batch: &[BatchItem<'_>],
    payload_batch: &[BatchItem<'_>],
) -> Result<(f64, Option<f64>), TrainingError> {
    if header_batch.is_empty() {
        return Err(TrainingError::Encoder(EncoderError::EmptyBatch));
    }
    let step = state.step;
    let loss_fm = side_step(
        &mut state.theta_h,
        &mut state.adam_h,
        header_cfg,
        header_batch,
        Side::Header,
        cfg,
        step,
    )?;
    let loss_rm = if payload_batch.is_empty() {
        None
    } else {
        Some(side_step(
            &mut state.theta_p,
            &mut state.adam_p,
            payload_cfg,
            payload_batch,
            Side::Payload,
            cfg,
            step,
        )?)
    };
    state.step += 1;
    Ok((loss_fm, loss_rm))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss_fm: f64,
    /// `None` when the corpus has no non-empty payloads.
    pub loss_rm: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

/// A finished pre-training run: the checkpoint plus the per-step log.
#[derive(Debug, Clone)]
pub struct PretrainOutput<F: Scalar> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<StepLog>,
}

fn take_batch<'a>(
    seqs: &'a [TokenSequence],
    cursor: &mut usize,
    size: usize,
) -> Vec<BatchItem<'a>> {
    if seqs.is_empty() {
        return Vec::new();
    }
    // Cap at the stream length so one batch never contains the same
    // sequence twice (duplicates would carry identical plans).
    (0..size.min(seqs.len()))
        .map(|_| {
            let i = *cursor % seqs.len();
            *cursor += 1;
            BatchItem { sequence_id: i as u64, seq: &seqs[i] }
        })
        .collect()
}

/// Pre-train both encoders over a packet corpus.
///
/// Headers of every record feed the field-masked stream; payloads feed the
/// random-masked stream, with empty payloads (pure ACKs and the like)
/// skipped. Batches cycle through each stream in corpus order. The result
/// is reproducible bit-for-bit from (config, corpus order).
pub fn run_pretrain<F: Scalar>(
    cfg: &PretrainConfig,
    header_cfg: &EncoderConfig,
    payload_cfg: &EncoderConfig,
    corpus: impl IntoIterator<Item = PacketRecord>,
) -> Result<PretrainOutput<F>, TrainingError> {
    cfg.validate()?;
    header_cfg.validate()?;
    payload_cfg.validate()?;

    let mut header_seqs = Vec::new();
    let mut payload_seqs = Vec::new();
    for rec in corpus {
        header_seqs.push(tokenize_bytes(&rec.header_bytes, header_cfg.max_len));
        if !rec.payload_bytes.is_empty() {
            payload_seqs.push(tokenize_bytes(&rec.payload_bytes, payload_cfg.max_len));
        }
    }
    if header_seqs.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    if payload_seqs.is_empty() {
        log::warn!(
            "corpus has no non-empty payloads; the payload encoder keeps its initialization"
        );
    }

    let mut state = PretrainState::<F>::init(cfg, header_cfg, payload_cfg);
    let mut log_rows = Vec::with_capacity(cfg.steps);
    let mut hdr_cursor = 0usize;
    let mut pay_cursor = 0usize;
    for _ in 0..cfg.steps {
        let started = Instant::now();
        let step = state.step;
        let header_batch = take_batch(&header_seqs, &mut hdr_cursor, cfg.batch_size);
        let payload_batch = take_batch(&payload_seqs, &mut pay_cursor, cfg.batch_size);
        let lr = scheduled_lr(cfg.lr, step, cfg.steps);
        let (loss_fm, loss_rm) =
            pretrain_step(&mut state, cfg, header_cfg, payload_cfg, &header_batch, &payload_batch)?;
        log_rows.push(StepLog {
            step,
            loss_fm,
            loss_rm,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        let done = step + 1;
        if done % 100 == 0 || done == cfg.steps {
            assert!(
                state.theta_h.all_finite() && state.theta_p.all_finite(),
                "non-finite parameters after step {step}"
            );
            log::info!(
                "step {done}/{} loss_fm {loss_fm:.4} loss_rm {} lr {lr:.3e}",
                cfg.steps,
                loss_rm.map_or_else(|| "-".to_string(), |l| format!("{l:.4}")),
            );
        }
    }

    let moments = Moments {
        t_h: state.adam_h.t,
        t_p: state.adam_p.t,
        m_h: state.adam_h.m,
        v_h: state.adam_h.v,
        m_p: state.adam_p.m,
        v_p: state.adam_p.v,
    };
    let checkpoint = Checkpoint {
        header_config: header_cfg.clone(),
        payload_config: payload_cfg.clone(),
        theta_h: state.theta_h,
        theta_p: state.theta_p,
        moments: Some(moments),
        step: state.step as u64,
        base_seed: cfg.seed,
    };
    Ok(PretrainOutput { checkpoint, log: log_rows })
}

/// Write the training log as CSV with header
/// `step,loss_fm,loss_rm,lr,wall_ms`. A missing payload loss is written as
/// `NaN`.
pub fn write_training_log_csv<W: std::io::Write>(
    out: W,
    rows: &[StepLog],
) -> Result<(), TrainingError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss_fm", "loss_rm", "lr", "wall_ms"]).map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss_fm.to_string(),
            r.loss_rm.map_or_else(|| "NaN".to_string(), |l| l.to_string()),
            r.lr.to_string(),
            format!("{:.3}", r.wall_ms),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TrainingError {
    TrainingError::Io(std::io::Error::other(e))
}
