//! Exact reverse-mode gradients, mirroring `forward.rs` step by step in
//! reverse. Every formula here is pinned by the finite-difference check in
//! `gradcheck.rs`.

use super::forward::{ForwardTrace, MlmTrace, VOCAB_CHUNK};
use super::math::{colsum, dgelu, layernorm_bwd};
use super::params::EncoderParams;
use super::{EncoderConfig, Scalar};
use ndarray::{s as nds, Array2};

/// Gradient of `scale · loss_sum` with respect to every parameter.
///
/// Passing `scale = 1` differentiates the summed loss; the optimizer
/// passes `1/M` for the mean form. Gradients are exactly linear in
/// `scale`.
pub fn backward<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    trace: &ForwardTrace<F>,
    mlm: &MlmTrace<F>,
    scale: F,
) -> EncoderParams<F> {
    let mut grads = params.zeros_like();
    let d = cfg.hidden;
    let b = trace.batch;
    let l_eff = trace.l_eff;
    let m = mlm.tokens.len();
    let vocab = params.token_embedding.nrows();

    // ---- prediction head ----
    // Softmax-minus-onehot rows are rebuilt per vocabulary chunk from the
    // stored log-sum-exp, so nothing of width `vocab` is materialized.
    let mut d_ln_out = Array2::<F>::zeros((m, d));
    for start in (0..vocab).step_by(VOCAB_CHUNK) {
        let end = (start + VOCAB_CHUNK).min(vocab);
        let emb = params.token_embedding.slice(nds![start..end, ..]);
        let mut logits = mlm.ln_out.dot(&emb.t());
        let bias = params.mlm.out_bias.slice(nds![start..end]);
        for mut row in logits.rows_mut() {
            row += &bias;
        }
        // p = softmax − onehot, scaled
        for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
            let lse = mlm.lse[i];
            row.mapv_inplace(|logit| (logit - lse).exp());
            let target = mlm.tokens[i].target as usize;
            if (start..end).contains(&target) {
                row[target - start] -= F::one();
            }
            row.mapv_inplace(|v| v * scale);
        }
        let p = logits;
        d_ln_out += &p.dot(&emb);
        grads
            .token_embedding
            .slice_mut(nds![start..end, ..])
            .scaled_add(F::one(), &p.t().dot(&mlm.ln_out));
        let mut ob = grads.mlm.out_bias.slice_mut(nds![start..end]);
        ob += &colsum(&p);
    }
    let (dg2, dlng, dlnb) = layernorm_bwd(&mlm.ln, &params.mlm.ln_gain, &d_ln_out);
    grads.mlm.ln_gain += &dlng;
    grads.mlm.ln_bias += &dlnb;
    let mut dt = dg2;
    dt.zip_mut_with(&mlm.t_pre, |dv, &t| *dv *= dgelu(t));
    grads.mlm.transform_w += &mlm.h.t().dot(&dt);
    grads.mlm.transform_b += &colsum(&dt);
    let dh_rows = dt.dot(&params.mlm.transform_w.t());

    let mut dhidden = Array2::<F>::zeros((b * l_eff, d));
    for (i, tok) in mlm.tokens.iter().enumerate() {
        let mut row = dhidden.row_mut(tok.batch * l_eff + tok.pos);
        row += &dh_rows.row(i);
    }

    accumulate_from_hidden(params, cfg, trace, &dhidden, &mut grads);
    grads
}

/// Gradients of a scalar whose derivative with respect to the final hidden
/// states is `dhidden` (rows indexed `batch·l_eff + position`). This is
/// the entry point for heads other than token recovery — the flow
/// classifier feeds its gradient in at the CLS rows. Prediction-head
/// parameters receive zero gradient.
pub fn backward_from_hidden<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    trace: &ForwardTrace<F>,
    dhidden: &Array2<F>,
) -> EncoderParams<F> {
    assert_eq!(
        dhidden.dim(),
        trace.hidden.dim(),
        "hidden-state gradient must match the trace"
    );
    let mut grads = params.zeros_like();
    accumulate_from_hidden(params, cfg, trace, dhidden, &mut grads);
    grads
}

/// Shared tail of the reverse pass: final layer norm, the transformer
/// layers in reverse, and the embedding scatter.
fn accumulate_from_hidden<F: Scalar>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    trace: &ForwardTrace<F>,
    dhidden: &Array2<F>,
    grads: &mut EncoderParams<F>,
) {
    let d = cfg.hidden;
    let dh = cfg.head_dim();
    let heads = cfg.heads;
    let attn_scale = super::s::<F>(1.0 / (dh as f64).sqrt());
    let b = trace.batch;
    let l_eff = trace.l_eff;

    // ---- final layer norm ----
    let (mut dx, dfg, dfb) = layernorm_bwd(&trace.final_ln, &params.final_ln_gain, dhidden);
    grads.final_ln_gain += &dfg;
    grads.final_ln_bias += &dfb;

    // ---- transformer layers, in reverse ----
    for (li, (lp, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];

        // feed-forward branch: x3 = x2 + drop(g·W2 + b2)
        let df = match &lt.f_drop {
            Some(mask) => &dx * mask,
            None => dx.clone(),
        };
        let dg = df.dot(&lp.w2.t());
        gl.w2 += &lt.g.t().dot(&df);
        gl.b2 += &colsum(&df);
        let mut dh1 = dg;
        dh1.zip_mut_with(&lt.h1, |dv, &h| *dv *= dgelu(h));
        // m (the ln2 output) is rebuilt from its cached normalized form
        let mut m_act = lt.ln2.xhat.clone();
        for mut row in m_act.rows_mut() {
            row.zip_mut_with(&lp.ln2_gain, |v, &g| *v *= g);
            row.zip_mut_with(&lp.ln2_bias, |v, &bb| *v += bb);
        }
        gl.w1 += &m_act.t().dot(&dh1);
        gl.b1 += &colsum(&dh1);
        let dm = dh1.dot(&lp.w1.t());
        let (dx2_ln, dg2n, db2n) = layernorm_bwd(&lt.ln2, &lp.ln2_gain, &dm);
        gl.ln2_gain += &dg2n;
        gl.ln2_bias += &db2n;
        let dx2 = &dx + &dx2_ln;

        // attention branch: x2 = x + drop(ctx·Wo + bo)
        let do_ = match &lt.o_drop {
            Some(mask) => &dx2 * mask,
            None => dx2.clone(),
        };
        gl.wo += &lt.ctx.t().dot(&do_);
        gl.bo += &colsum(&do_);
        let dctx = do_.dot(&lp.wo.t());

        let mut dq = Array2::<F>::zeros((b * l_eff, d));
        let mut dk = Array2::<F>::zeros((b * l_eff, d));
        let mut dv = Array2::<F>::zeros((b * l_eff, d));
        for bi in 0..b {
            let valid = trace.real_lens[bi];
            let rows = nds![bi * l_eff..(bi + 1) * l_eff, ..];
            for hi in 0..heads {
                let cols = nds![.., hi * dh..(hi + 1) * dh];
                let dctx_h = dctx.slice(rows).slice_move(cols);
                let qh = lt.q.slice(rows).slice_move(cols);
                let kh = lt.k.slice(rows).slice_move(cols);
                let vh = lt.v.slice(rows).slice_move(cols);
                let probs = lt.probs.slice(nds![bi, hi, .., ..]);
                let p_used = match &lt.probs_drop {
                    Some(mask) => &probs * &mask.slice(nds![bi, hi, .., ..]),
                    None => probs.to_owned(),
                };
                let dp_used = dctx_h.dot(&vh.t());
                let dvh = p_used.t().dot(&dctx_h);
                dv.slice_mut(rows).slice_move(cols).scaled_add(F::one(), &dvh);
                let dp = match &lt.probs_drop {
                    Some(mask) => &dp_used * &mask.slice(nds![bi, hi, .., ..]),
                    None => dp_used,
                };
                // softmax backward, row-wise over the valid key prefix
                let mut ds = Array2::<F>::zeros((l_eff, l_eff));
                for r in 0..l_eff {
                    let mut dot = F::zero();
                    for c in 0..valid {
                        dot += dp[[r, c]] * probs[[r, c]];
                    }
                    for c in 0..valid {
                        ds[[r, c]] = probs[[r, c]] * (dp[[r, c]] - dot);
                    }
                }
                let mut dqh = ds.dot(&kh);
                dqh *= attn_scale;
                dq.slice_mut(rows).slice_move(cols).scaled_add(F::one(), &dqh);
                let mut dkh = ds.t().dot(&qh);
                dkh *= attn_scale;
                dk.slice_mut(rows).slice_move(cols).scaled_add(F::one(), &dkh);
            }
        }

        // a (the ln1 output) rebuilt the same way as m above
        let mut a_act = lt.ln1.xhat.clone();
        for mut row in a_act.rows_mut() {
            row.zip_mut_with(&lp.ln1_gain, |v, &g| *v *= g);
            row.zip_mut_with(&lp.ln1_bias, |v, &bb| *v += bb);
        }
        gl.wq += &a_act.t().dot(&dq);
        gl.bq += &colsum(&dq);
        gl.wk += &a_act.t().dot(&dk);
        gl.bk += &colsum(&dk);
        gl.wv += &a_act.t().dot(&dv);
        gl.bv += &colsum(&dv);
        let da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let (dx_ln, dg1n, db1n) = layernorm_bwd(&lt.ln1, &lp.ln1_gain, &da);
        gl.ln1_gain += &dg1n;
        gl.ln1_bias += &db1n;
        dx = &dx2 + &dx_ln;
    }

    // ---- embeddings ----
    for bi in 0..b {
        for t in 0..l_eff {
            let row = dx.row(bi * l_eff + t);
            let id = trace.ids[[bi, t]] as usize;
            let mut emb = grads.token_embedding.row_mut(id);
            emb += &row;
            let mut pos = grads.position_embedding.row_mut(t);
            pos += &row;
        }
    }
}
