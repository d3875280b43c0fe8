//! Mask planning for differentiated pre-training.
//!
//! Header sequences get *field-level masking* (FM): contiguous spans whose
//! lengths are drawn from a geometric distribution, standing in for protocol
//! field boundaries without parsing any fields. Payload sequences get
//! *random masking* (RM): a fixed fraction of positions chosen uniformly.
//! Plans are pure functions of a [`MaskSeed`], so masks can be regenerated
//! per training step (dynamic masking) or pinned (static masking) without
//! storing them.

mod schema;

pub use schema::{
    compare_geometric, field_length_counts, normalize_counts, write_geo_comparison_csv,
    FieldSchema, IPV4_SCHEMA, IPV6_SCHEMA, TCP_SCHEMA, UDP_SCHEMA,
};

use crate::tokenize::{TokenSequence, CLS, MASK, PAD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    /// A plan position points at CLS or a PAD position of the sequence.
    #[error("plan position {0} indexes CLS or PAD")]
    PlanMismatch(usize),
}

/// Geometric span-length distribution, `P(len = k) = (1-p)^(k-1) * p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricSampler {
    p: f64,
}

impl Default for GeometricSampler {
    fn default() -> Self {
        Self { p: 0.7 }
    }
}

impl GeometricSampler {
    /// Panics unless `p` is in (0, 1].
    pub fn new(p: f64) -> Self {
        assert!(p > 0.0 && p <= 1.0, "geometric p must be in (0, 1], got {p}");
        Self { p }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Mean span length, `1/p`.
    pub fn mean(&self) -> f64 {
        1.0 / self.p
    }

    /// `P(len = k)` for `k >= 1`.
    pub fn pmf(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        (1.0 - self.p).powi(k as i32 - 1) * self.p
    }

    /// `P(len >= k)` for `k >= 1`.
    pub fn tail(&self, k: usize) -> f64 {
        if k <= 1 {
            return 1.0;
        }
        (1.0 - self.p).powi(k as i32 - 1)
    }

    /// Draw a span length by inverse CDF: `1 + floor(ln(1-u) / ln(1-p))`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        if self.p >= 1.0 {
            return 1;
        }
        let l = 1.0 + ((1.0 - u).ln() / (1.0 - self.p).ln()).floor();
        l as usize
    }
}

/// Identifies one mask-plan draw: the derived stream seed is a pure
/// function of `(base_seed, step, sequence_id)`, so regenerating a plan for
/// the same step always gives the same result while different steps give
/// independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSeed {
    pub base_seed: u64,
    pub step: u64,
    pub sequence_id: u64,
}

/// splitmix64 finalizer; full-avalanche 64-bit mixer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl MaskSeed {
    pub fn new(base_seed: u64, step: u64, sequence_id: u64) -> Self {
        Self { base_seed, step, sequence_id }
    }

    /// Static-masking variant: the step component is pinned to zero, so the
    /// derived stream depends on `(base_seed, sequence_id)` only.
    pub fn without_step(base_seed: u64, sequence_id: u64) -> Self {
        Self { base_seed, step: 0, sequence_id }
    }

    /// Derived 64-bit stream seed: three chained splitmix64 rounds folding
    /// in step and sequence id.
    pub fn stream_seed(&self) -> u64 {
        let s = splitmix64(self.base_seed);
        let s = splitmix64(s ^ self.step);
        splitmix64(s ^ self.sequence_id)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.stream_seed())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    FieldLevel,
    Random,
}

/// The positions to mask for one sequence at one step, with the original
/// token ids they cover. Positions are sorted, never index 0 (CLS), and
/// never index a PAD position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub kind: MaskKind,
    pub budget_ratio: f64,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

/// One accepted FM span: observed length and whether it was cut short by
/// the end of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanDraw {
    pub len: usize,
    pub truncated: bool,
}

/// Field-level masking: geometric-length spans, rejection-sampled so that
/// accepted spans neither overlap nor touch each other. The gap keeps every
/// maximal masked run equal to one accepted span, so run-length statistics
/// stay faithful to the geometric law.
///
/// Spans are drawn until the budget `ceil(ratio * maskable)` is reached or
/// 10x budget attempts have been spent. A span that would overrun the last
/// real token is truncated there.
pub fn plan_field_mask(
    seq: &TokenSequence,
    sampler: &GeometricSampler,
    ratio: f64,
    seed: MaskSeed,
) -> MaskPlan {
    plan_field_mask_with_spans(seq, sampler, ratio, seed).0
}

/// Like [`plan_field_mask`] but also reports the accepted spans, which the
/// run-length statistics tooling needs to attribute truncations.
pub fn plan_field_mask_with_spans(
    seq: &TokenSequence,
    sampler: &GeometricSampler,
    ratio: f64,
    seed: MaskSeed,
) -> (MaskPlan, Vec<SpanDraw>) {
    assert!(ratio > 0.0 && ratio < 1.0, "mask ratio must be in (0, 1), got {ratio}");
    let real_len = seq.real_len;
    let maskable = seq.maskable_count();
    let mut plan = MaskPlan {
        positions: Vec::new(),
        targets: Vec::new(),
        kind: MaskKind::FieldLevel,
        budget_ratio: ratio,
    };
    let mut spans = Vec::new();
    if maskable == 0 {
        return (plan, spans);
    }

    let budget = (ratio * maskable as f64).ceil() as usize;
    let max_attempts = 10 * budget;
    let mut rng = seed.rng();
    let mut occupied = vec![false; real_len];
    let mut chosen = 0usize;
    let mut attempts = 0usize;

    while chosen < budget && attempts < max_attempts {
        attempts += 1;
        let len = sampler.sample(&mut rng);
        let start = rng.gen_range(1..real_len);
        let end = (start + len).min(real_len);
        // Reject on overlap or adjacency with an already chosen span.
        let guard_lo = start - 1;
        let guard_hi = end.min(real_len - 1);
        if occupied[guard_lo..=guard_hi].iter().any(|&o| o) {
            continue;
        }
        for slot in &mut occupied[start..end] {
            *slot = true;
        }
        chosen += end - start;
        spans.push(SpanDraw { len: end - start, truncated: start + len > real_len });
    }

    plan.positions = occupied
        .iter()
        .enumerate()
        .filter_map(|(i, &o)| o.then_some(i))
        .collect();
    plan.targets = plan.positions.iter().map(|&i| seq.ids[i]).collect();
    (plan, spans)
}

/// Random masking: `ceil(ratio * maskable)` positions drawn uniformly
/// without replacement from indices `1..real_len`.
pub fn plan_random_mask(seq: &TokenSequence, ratio: f64, seed: MaskSeed) -> MaskPlan {
    assert!(ratio > 0.0 && ratio <= 1.0, "mask ratio must be in (0, 1], got {ratio}");
    let maskable = seq.maskable_count();
    let mut plan = MaskPlan {
        positions: Vec::new(),
        targets: Vec::new(),
        kind: MaskKind::Random,
        budget_ratio: ratio,
    };
    if maskable == 0 {
        return plan;
    }
    let r = ((ratio * maskable as f64).ceil() as usize).min(maskable);
    let mut rng = seed.rng();
    let mut picked = rand::seq::index::sample(&mut rng, maskable, r).into_vec();
    picked.sort_unstable();
    plan.positions = picked.into_iter().map(|i| i + 1).collect();
    plan.targets = plan.positions.iter().map(|&i| seq.ids[i]).collect();
    plan
}

/// Replace the planned positions with MASK. Returns the masked sequence and
/// a position -> original-id map.
pub fn apply_mask(
    seq: &TokenSequence,
    plan: &MaskPlan,
) -> Result<(TokenSequence, BTreeMap<usize, u32>), MaskError> {
    let mut masked = seq.clone();
    let mut targets = BTreeMap::new();
    for &pos in &plan.positions {
        if pos == 0 || pos >= seq.real_len {
            return Err(MaskError::PlanMismatch(pos));
        }
        debug_assert!(seq.ids[pos] != CLS && seq.ids[pos] != PAD);
        targets.insert(pos, seq.ids[pos]);
        masked.ids[pos] = MASK;
    }
    Ok((masked, targets))
}

/// Decompose a plan's positions into maximal runs of consecutive indices
/// and return their lengths.
pub fn maximal_runs(positions: &[usize]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut iter = positions.iter().copied();
    let Some(first) = iter.next() else {
        return runs;
    };
    let mut run_start = first;
    let mut prev = first;
    for pos in iter {
        if pos != prev + 1 {
            runs.push(prev - run_start + 1);
            run_start = pos;
        }
        prev = pos;
    }
    runs.push(prev - run_start + 1);
    runs
}

/// Build a dummy all-real sequence of `real_len` tokens (CLS + byte pairs),
/// used by statistics tooling that only cares about positions.
pub fn synthetic_sequence(real_len: usize) -> TokenSequence {
    assert!(real_len >= 1);
    let mut ids = vec![crate::tokenize::BYTE_PAIR_BASE; real_len];
    ids[0] = CLS;
    TokenSequence { attn: vec![1; real_len], ids, real_len }
}

/// Histogram of observed FM span lengths over `n_plans` plans on a
/// `real_len`-token sequence. End-truncated spans are counted toward the
/// top bin since their drawn length was at least as large as observed.
pub fn run_length_histogram(
    real_len: usize,
    sampler: &GeometricSampler,
    ratio: f64,
    base_seed: u64,
    n_plans: usize,
) -> BTreeMap<usize, usize> {
    let seq = synthetic_sequence(real_len);
    let mut observed: Vec<SpanDraw> = Vec::new();
    for step in 0..n_plans {
        let seed = MaskSeed::new(base_seed, step as u64, 0);
        let (_, spans) = plan_field_mask_with_spans(&seq, sampler, ratio, seed);
        observed.extend(spans);
    }
    let top = observed.iter().map(|s| s.len).max().unwrap_or(1);
    let mut hist = BTreeMap::new();
    for span in observed {
        let bin = if span.truncated { top } else { span.len };
        *hist.entry(bin).or_insert(0) += 1;
    }
    hist
}

/// Write a `length,count,empirical_freq,geometric_pmf` CSV comparing a
/// run-length histogram against Geo(p). The last row aggregates the
/// geometric tail mass so rows sum to one in both frequency columns.
pub fn write_run_length_csv<W: std::io::Write>(
    w: W,
    hist: &BTreeMap<usize, usize>,
    p: f64,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["length", "count", "empirical_freq", "geometric_pmf"])
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let total: usize = hist.values().sum();
    let top = hist.keys().max().copied().unwrap_or(1);
    let geo = GeometricSampler::new(p);
    for len in 1..=top {
        let count = hist.get(&len).copied().unwrap_or(0);
        let freq = count as f64 / total.max(1) as f64;
        let pmf = if len == top { geo.tail(len) } else { geo.pmf(len) };
        w.write_record(&[len.to_string(), count.to_string(), freq.to_string(), pmf.to_string()])
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.flush()
}
