//! Central finite-difference verification of the hand-written backward
//! pass. Runs in f64; part of the standing test suite and the acceptance
//! gate.

use super::forward::{encode_batch, mlm_forward, MaskedToken};
use super::params::EncoderParams;
use super::{backward, EncoderConfig, Precision};
use crate::tokenize::{TokenSequence, CLS, PAD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub params_checked: usize,
}

/// Worst-case relative error between analytic gradients and central
/// finite differences over every parameter element.
///
/// Entries where both values are below `1e-6` in magnitude are compared
/// absolutely (tolerance `1e-10`) because the difference quotient's
/// cancellation noise would otherwise dominate a meaningless ratio.
pub fn finite_difference_check(
    cfg: &EncoderConfig,
    seqs: &[TokenSequence],
    tokens: &[MaskedToken],
    seed: u64,
    step: f64,
) -> GradCheckReport {
    assert_eq!(cfg.precision, Precision::F64, "finite differences need f64");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::<f64>::init(cfg, &mut rng);
    // The check runs at 10× the production init scale. At std 0.02 the
    // pre-norm rows have tiny variance, so 1/σ — and with it the loss's
    // third derivative — explodes, and the h² truncation error of the
    // difference quotient swamps the comparison for small entries. The
    // gradient code under test is identical either way; the larger scale
    // just keeps the probe itself honest.
    for (name, mut t) in params.tensor_views_mut() {
        if !name.contains("gain") {
            t.mapv_inplace(|v| v * 10.0);
        }
    }

    let loss = |p: &EncoderParams<f64>| -> f64 {
        let trace = encode_batch(p, cfg, seqs, None).expect("forward in gradcheck");
        mlm_forward(p, &trace, tokens).expect("head forward in gradcheck").loss.sum
    };

    let trace = encode_batch(&params, cfg, seqs, None).expect("forward");
    let mlm = mlm_forward(&params, &trace, tokens).expect("head forward");
    let analytic = backward(&params, cfg, &trace, &mlm, 1.0);

    let flat_analytic: Vec<(String, Vec<f64>)> = analytic
        .tensor_views()
        .into_iter()
        .map(|(name, t)| (name, t.iter().copied().collect()))
        .collect();

    let perturb = |p: &mut EncoderParams<f64>, ti: usize, ei: usize, delta: f64| {
        let mut views = p.tensor_views_mut();
        let v = views[ti].1.iter_mut().nth(ei).expect("element in range");
        *v += delta;
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_tensor = String::from("none");
    let mut params_checked = 0usize;
    for (ti, (name, entries)) in flat_analytic.iter().enumerate() {
        for (ei, &a) in entries.iter().enumerate() {
            perturb(&mut params, ti, ei, step);
            let up = loss(&params);
            perturb(&mut params, ti, ei, -2.0 * step);
            let down = loss(&params);
            perturb(&mut params, ti, ei, step);
            let fd = (up - down) / (2.0 * step);
            params_checked += 1;
            let denom = a.abs().max(fd.abs());
            let rel = if denom > 1e-6 {
                (a - fd).abs() / denom
            } else if (a - fd).abs() > 1e-10 {
                1.0 // tiny gradients must still agree absolutely
            } else {
                0.0
            };
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_tensor = format!("{name}[{ei}]");
            }
        }
    }
    GradCheckReport { max_rel_err, worst_tensor, params_checked }
}

/// The pinned gradient-check instance: d=8, L=8, 1 layer, 2 heads, on a
/// 64-token vocabulary so the tied-embedding sweep stays exhaustive yet
/// fast. Two sequences of different real lengths exercise key masking.
pub fn standard_check() -> GradCheckReport {
    let cfg = EncoderConfig {
        vocab_size: 64,
        max_len: 8,
        hidden: 8,
        layers: 1,
        heads: 2,
        dropout: 0.0,
        precision: Precision::F64,
    };
    let seq_a = TokenSequence {
        ids: vec![CLS, 10, 21, 32, 43, 54, PAD, PAD],
        attn: vec![1, 1, 1, 1, 1, 1, 0, 0],
        real_len: 6,
    };
    let seq_b = TokenSequence {
        ids: vec![CLS, 9, 18, 27, 36, 45, 54, 63],
        attn: vec![1; 8],
        real_len: 8,
    };
    let tokens = vec![
        MaskedToken { batch: 0, pos: 2, target: 21 },
        MaskedToken { batch: 0, pos: 5, target: 54 },
        MaskedToken { batch: 1, pos: 1, target: 9 },
        MaskedToken { batch: 1, pos: 7, target: 63 },
    ];
    finite_difference_check(&cfg, &[seq_a, seq_b], &tokens, 0xfeed, 1e-4)
}
