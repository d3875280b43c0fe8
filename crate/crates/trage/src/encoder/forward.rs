//! Forward pass with activation caching sufficient for exact backward.

use super::math::{gelu, layernorm_fwd, LnTrace, MlmLoss};
use super::params::EncoderParams;
use super::{s, EncoderConfig, EncoderError, Scalar};
use crate::tokenize::TokenSequence;
use ndarray::{s as nds, Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Vocabulary chunk width for the streamed prediction-head matmul; keeps
/// peak logits memory at `rows × 4096` instead of `rows × vocab`.
pub(crate) const VOCAB_CHUNK: usize = 4096;

/// Dropout request for a train-mode forward. Evaluation passes `None` and
/// is fully deterministic.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Cached activations for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<F> {
    pub ln1: LnTrace<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Softmax attention weights `[batch, head, query, key]`, pre-dropout.
    pub probs: Array4<F>,
    pub probs_drop: Option<Array4<F>>,
    /// Concatenated per-head context `[B·L, d]`.
    pub ctx: Array2<F>,
    pub o_drop: Option<Array2<F>>,
    pub ln2: LnTrace<F>,
    /// Feed-forward pre-activation.
    pub h1: Array2<F>,
    /// Feed-forward post-GELU activation.
    pub g: Array2<F>,
    pub f_drop: Option<Array2<F>>,
}

/// Everything the backward pass needs: inputs, per-layer activations, and
/// the final hidden states (rows are `batch·l_eff + position`).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub ids: Array2<u32>,
    pub real_lens: Vec<usize>,
    pub batch: usize,
    pub l_eff: usize,
    pub x0: Array2<F>,
    pub layers: Vec<LayerTrace<F>>,
    pub final_ln: LnTrace<F>,
    pub hidden: Array2<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    /// Hidden state of one position, `[d]`.
    pub fn hidden_row(&self, batch: usize, pos: usize) -> ndarray::ArrayView1<'_, F> {
        self.hidden.row(batch * self.l_eff + pos)
    }
}

/// One masked position in a batch with the token the model must recover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedToken {
    pub batch: usize,
    pub pos: usize,
    pub target: u32,
}

/// Prediction-head activations plus the per-row log-sum-exp needed to
/// rebuild softmax rows chunk-by-chunk in backward.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmTrace<F> {
    pub tokens: Vec<MaskedToken>,
    /// Gathered hidden rows `[M, d]`.
    pub h: Array2<F>,
    pub t_pre: Array2<F>,
    pub ln: LnTrace<F>,
    /// Normalized head output that multiplies the tied embedding.
    pub ln_out: Array2<F>,
    pub lse: Array1<F>,
    pub loss: MlmLoss<F>,
}

fn check_batch<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[TokenSequence],
) -> Result<(), EncoderError> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(EncoderError::ShapeMismatch("empty batch".into()));
    }
    if params.token_embedding.dim() != (cfg.vocab_size, cfg.hidden)
        || params.position_embedding.dim() != (cfg.max_len, cfg.hidden)
        || params.layers.len() != cfg.layers
    {
        return Err(EncoderError::ShapeMismatch(
            "parameter tensors do not match the config".into(),
        ));
    }
    for (i, seq) in seqs.iter().enumerate() {
        if seq.ids.len() != cfg.max_len {
            return Err(EncoderError::ShapeMismatch(format!(
                "sequence {i} has length {} but the encoder expects {}",
                seq.ids.len(),
                cfg.max_len
            )));
        }
        if seq.real_len == 0 || seq.real_len > cfg.max_len {
            return Err(EncoderError::ShapeMismatch(format!(
                "sequence {i} has real length {}",
                seq.real_len
            )));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(EncoderError::ShapeMismatch(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Encode a batch, cropping to the longest real length present. PAD
/// columns carry exact-zero attention weight, so cropping never changes
/// the value computed at any real position.
pub fn encode_batch<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[TokenSequence],
    dropout: Option<Dropout<'_>>,
) -> Result<ForwardTrace<F>, EncoderError> {
    check_batch(params, cfg, seqs)?;
    let l_eff = seqs.iter().map(|s| s.real_len).max().expect("non-empty batch");
    forward(params, cfg, seqs, l_eff, dropout)
}

/// Encode one sequence at full configured length (evaluation mode);
/// `trace.hidden` is the `[max_len × d]` hidden-state matrix.
pub fn encode<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<ForwardTrace<F>, EncoderError> {
    check_batch(params, cfg, std::slice::from_ref(seq))?;
    forward(params, cfg, std::slice::from_ref(seq), cfg.max_len, None)
}

fn bernoulli_mask<F: Scalar>(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> ndarray::ArrayD<F> {
    let keep_scale = s::<F>(1.0 / (1.0 - p));
    ndarray::ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            keep_scale
        }
    })
}

fn forward<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    seqs: &[TokenSequence],
    l_eff: usize,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardTrace<F>, EncoderError> {
    let b = seqs.len();
    let d = cfg.hidden;
    let dh = cfg.head_dim();
    let heads = cfg.heads;
    let scale = s::<F>(1.0 / (dh as f64).sqrt());
    let real_lens: Vec<usize> = seqs.iter().map(|s| s.real_len).collect();

    let mut ids = Array2::<u32>::zeros((b, l_eff));
    let mut x = Array2::<F>::zeros((b * l_eff, d));
    for (bi, seq) in seqs.iter().enumerate() {
        for t in 0..l_eff {
            let id = seq.ids[t];
            ids[[bi, t]] = id;
            let row = bi * l_eff + t;
            let emb = params.token_embedding.row(id as usize);
            let pos = params.position_embedding.row(t);
            for c in 0..d {
                x[[row, c]] = emb[c] + pos[c];
            }
        }
    }
    let x0 = x.clone();

    let mut layers = Vec::with_capacity(cfg.layers);
    for lp in &params.layers {
        let (a, ln1) = layernorm_fwd(&x, &lp.ln1_gain, &lp.ln1_bias);
        let mut q = a.dot(&lp.wq);
        let mut k = a.dot(&lp.wk);
        let mut v = a.dot(&lp.wv);
        for mut row in q.rows_mut() {
            row += &lp.bq;
        }
        for mut row in k.rows_mut() {
            row += &lp.bk;
        }
        for mut row in v.rows_mut() {
            row += &lp.bv;
        }

        let mut probs = Array4::<F>::zeros((b, heads, l_eff, l_eff));
        for bi in 0..b {
            let valid = real_lens[bi];
            let rows = nds![bi * l_eff..(bi + 1) * l_eff, ..];
            for hi in 0..heads {
                let cols = nds![.., hi * dh..(hi + 1) * dh];
                let qh = q.slice(rows).slice_move(cols);
                let kh = k.slice(rows).slice_move(cols);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                let mut target = probs.slice_mut(nds![bi, hi, .., ..]);
                for (score_row, mut prob_row) in
                    scores.rows().into_iter().zip(target.rows_mut())
                {
                    // keys at or beyond the real length are excluded
                    // (additive −∞ mask ⇒ exact zero weight)
                    let valid_scores = score_row.slice(nds![..valid]);
                    let max = valid_scores.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut denom = F::zero();
                    for (c, &v_) in valid_scores.iter().enumerate() {
                        let e = (v_ - max).exp();
                        prob_row[c] = e;
                        denom += e;
                    }
                    let inv = F::one() / denom;
                    for c in 0..valid {
                        prob_row[c] *= inv;
                    }
                }
            }
        }

        let probs_drop = dropout.as_mut().map(|dr| {
            bernoulli_mask::<F>(&[b, heads, l_eff, l_eff], dr.p, dr.rng)
                .into_dimensionality()
                .expect("static rank 4")
        });

        let mut ctx = Array2::<F>::zeros((b * l_eff, d));
        for bi in 0..b {
            let rows = nds![bi * l_eff..(bi + 1) * l_eff, ..];
            for hi in 0..heads {
                let cols = nds![.., hi * dh..(hi + 1) * dh];
                let vh = v.slice(rows).slice_move(cols);
                let p_used = match &probs_drop {
                    Some(mask) => {
                        &probs.slice(nds![bi, hi, .., ..]) * &mask.slice(nds![bi, hi, .., ..])
                    }
                    None => probs.slice(nds![bi, hi, .., ..]).to_owned(),
                };
                let ctx_h = p_used.dot(&vh);
                ctx.slice_mut(rows).slice_move(cols).assign(&ctx_h);
            }
        }

        let mut o = ctx.dot(&lp.wo);
        for mut row in o.rows_mut() {
            row += &lp.bo;
        }
        let o_drop = dropout.as_mut().map(|dr| {
            bernoulli_mask::<F>(&[b * l_eff, d], dr.p, dr.rng)
                .into_dimensionality()
                .expect("static rank 2")
        });
        if let Some(mask) = &o_drop {
            o *= mask;
        }
        let x2 = &x + &o;

        let (m, ln2) = layernorm_fwd(&x2, &lp.ln2_gain, &lp.ln2_bias);
        let mut h1 = m.dot(&lp.w1);
        for mut row in h1.rows_mut() {
            row += &lp.b1;
        }
        let g = h1.mapv(gelu);
        let mut f = g.dot(&lp.w2);
        for mut row in f.rows_mut() {
            row += &lp.b2;
        }
        let f_drop = dropout.as_mut().map(|dr| {
            bernoulli_mask::<F>(&[b * l_eff, d], dr.p, dr.rng)
                .into_dimensionality()
                .expect("static rank 2")
        });
        if let Some(mask) = &f_drop {
            f *= mask;
        }
        let x3 = &x2 + &f;

        layers.push(LayerTrace {
            ln1,
            q,
            k,
            v,
            probs,
            probs_drop,
            ctx,
            o_drop,
            ln2,
            h1,
            g,
            f_drop,
        });
        x = x3;
    }

    let (hidden, final_ln) = layernorm_fwd(&x, &params.final_ln_gain, &params.final_ln_bias);
    Ok(ForwardTrace { ids, real_lens, batch: b, l_eff, x0, layers, final_ln, hidden })
}

/// Run the prediction head at the given masked positions and compute the
/// recovery loss with a vocabulary-chunked, numerically stable
/// log-sum-exp (the full `[M × vocab]` logits matrix is never formed).
pub fn mlm_forward<F: Scalar>(
    params: &EncoderParams<F>,
    trace: &ForwardTrace<F>,
    tokens: &[MaskedToken],
) -> Result<MlmTrace<F>, EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let vocab = params.token_embedding.nrows();
    for tok in tokens {
        if tok.batch >= trace.batch || tok.pos >= trace.real_lens[tok.batch] {
            return Err(EncoderError::ShapeMismatch(format!(
                "masked position ({}, {}) outside the batch",
                tok.batch, tok.pos
            )));
        }
        if tok.target as usize >= vocab {
            return Err(EncoderError::ShapeMismatch(format!(
                "target {} outside vocabulary of {vocab}",
                tok.target
            )));
        }
    }
    let d = trace.hidden.ncols();
    let m = tokens.len();
    let mut h = Array2::<F>::zeros((m, d));
    for (i, tok) in tokens.iter().enumerate() {
        h.row_mut(i).assign(&trace.hidden_row(tok.batch, tok.pos));
    }
    let mut t_pre = h.dot(&params.mlm.transform_w);
    for mut row in t_pre.rows_mut() {
        row += &params.mlm.transform_b;
    }
    let g2 = t_pre.mapv(gelu);
    let (ln_out, ln) = layernorm_fwd(&g2, &params.mlm.ln_gain, &params.mlm.ln_bias);

    let mut run_max = Array1::<F>::from_elem(m, F::neg_infinity());
    let mut run_sum = Array1::<F>::zeros(m);
    let mut target_logit = Array1::<F>::zeros(m);
    for start in (0..vocab).step_by(VOCAB_CHUNK) {
        let end = (start + VOCAB_CHUNK).min(vocab);
        let emb = params.token_embedding.slice(nds![start..end, ..]);
        let mut logits = ln_out.dot(&emb.t());
        let bias = params.mlm.out_bias.slice(nds![start..end]);
        for mut row in logits.rows_mut() {
            row += &bias;
        }
        for (i, row) in logits.rows().into_iter().enumerate() {
            let target = tokens[i].target as usize;
            if (start..end).contains(&target) {
                target_logit[i] = row[target - start];
            }
            let chunk_max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let new_max = run_max[i].max(chunk_max);
            let mut sum = if run_max[i] == F::neg_infinity() {
                F::zero()
            } else {
                run_sum[i] * (run_max[i] - new_max).exp()
            };
            for &v in row.iter() {
                sum += (v - new_max).exp();
            }
            run_max[i] = new_max;
            run_sum[i] = sum;
        }
    }
    let mut lse = Array1::<F>::zeros(m);
    let mut loss_sum = F::zero();
    for i in 0..m {
        lse[i] = run_max[i] + run_sum[i].ln();
        loss_sum += lse[i] - target_logit[i];
    }
    let loss = MlmLoss { sum: loss_sum, mean: loss_sum / s(m as f64), count: m };
    Ok(MlmTrace { tokens: tokens.to_vec(), h, t_pre, ln, ln_out, lse, loss })
}

/// Materialize prediction-head logits `[|positions| × vocab]` for one
/// encoded sequence. Intended for inspection and small-scale tests;
/// training uses the chunked path in [`mlm_forward`].
pub fn mlm_logits<F: Scalar>(
    params: &EncoderParams<F>,
    trace: &ForwardTrace<F>,
    positions: &[usize],
) -> Result<Array2<F>, EncoderError> {
    let vocab = params.token_embedding.nrows();
    let d = trace.hidden.ncols();
    if trace.batch != 1 {
        return Err(EncoderError::ShapeMismatch(
            "logit materialization expects a single-sequence trace".into(),
        ));
    }
    for &pos in positions {
        if pos >= trace.l_eff {
            return Err(EncoderError::ShapeMismatch(format!("position {pos} out of range")));
        }
    }
    let mut h = Array2::<F>::zeros((positions.len(), d));
    for (i, &pos) in positions.iter().enumerate() {
        h.row_mut(i).assign(&trace.hidden.row(pos));
    }
    let mut t_pre = h.dot(&params.mlm.transform_w);
    for mut row in t_pre.rows_mut() {
        row += &params.mlm.transform_b;
    }
    let g2 = t_pre.mapv(gelu);
    let (ln_out, _) = layernorm_fwd(&g2, &params.mlm.ln_gain, &params.mlm.ln_bias);
    let mut logits = ln_out.dot(&params.token_embedding.t());
    for mut row in logits.rows_mut() {
        row += &params.mlm.out_bias;
    }
    debug_assert_eq!(logits.dim(), (positions.len(), vocab));
    Ok(logits)
}
