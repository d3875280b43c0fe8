//! Parameter tensors for one encoder instance, with a stable named-tensor
//! enumeration used by the optimizer, checkpointing, and gradient checks.

use super::math::fill_truncated_normal;
use super::{EncoderConfig, Scalar};
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

const INIT_STD: f64 = 0.02;

/// One transformer layer: attention projections, feed-forward, and the two
/// pre-norm layer norms.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// Masked-token prediction head. The output projection is the transposed
/// token embedding (weight tying), so only its bias lives here.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<F> {
    pub transform_w: Array2<F>,
    pub transform_b: Array1<F>,
    pub ln_gain: Array1<F>,
    pub ln_bias: Array1<F>,
    pub out_bias: Array1<F>,
}

/// Every tensor of one encoder. Gradients and optimizer moments reuse this
/// same structure via [`EncoderParams::zeros_like`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub token_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_ln_gain: Array1<F>,
    pub final_ln_bias: Array1<F>,
    pub mlm: MlmHead<F>,
}

impl<F: Scalar> EncoderParams<F> {
    /// Random initialization: truncated normal (std 0.02) for embeddings
    /// and weight matrices, zeros for biases, ones for layer-norm gains.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("config validated before init");
        let d = cfg.hidden;
        let f = cfg.ffn_dim();
        let mut token_embedding = Array2::zeros((cfg.vocab_size, d));
        fill_truncated_normal(token_embedding.iter_mut(), INIT_STD, rng);
        let mut position_embedding = Array2::zeros((cfg.max_len, d));
        fill_truncated_normal(position_embedding.iter_mut(), INIT_STD, rng);
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let mut m = Array2::zeros((rows, cols));
            fill_truncated_normal(m.iter_mut(), INIT_STD, rng);
            m
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                wq: mat(d, d, rng),
                bq: Array1::zeros(d),
                wk: mat(d, d, rng),
                bk: Array1::zeros(d),
                wv: mat(d, d, rng),
                bv: Array1::zeros(d),
                wo: mat(d, d, rng),
                bo: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w1: mat(d, f, rng),
                b1: Array1::zeros(f),
                w2: mat(f, d, rng),
                b2: Array1::zeros(d),
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: Array1::ones(d),
            final_ln_bias: Array1::zeros(d),
            mlm: MlmHead {
                transform_w: mat(d, d, rng),
                transform_b: Array1::zeros(d),
                ln_gain: Array1::ones(d),
                ln_bias: Array1::zeros(d),
                out_bias: Array1::zeros(cfg.vocab_size),
            },
        }
    }

    /// All-zero parameters of the shapes the config dictates; the blank a
    /// checkpoint loader fills in.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden;
        let f = cfg.ffn_dim();
        Self {
            token_embedding: Array2::zeros((cfg.vocab_size, d)),
            position_embedding: Array2::zeros((cfg.max_len, d)),
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    ln1_gain: Array1::zeros(d),
                    ln1_bias: Array1::zeros(d),
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                    ln2_gain: Array1::zeros(d),
                    ln2_bias: Array1::zeros(d),
                    w1: Array2::zeros((d, f)),
                    b1: Array1::zeros(f),
                    w2: Array2::zeros((f, d)),
                    b2: Array1::zeros(d),
                })
                .collect(),
            final_ln_gain: Array1::zeros(d),
            final_ln_bias: Array1::zeros(d),
            mlm: MlmHead {
                transform_w: Array2::zeros((d, d)),
                transform_b: Array1::zeros(d),
                ln_gain: Array1::zeros(d),
                ln_bias: Array1::zeros(d),
                out_bias: Array1::zeros(cfg.vocab_size),
            },
        }
    }

    /// Same shapes, all zeros — the shape of a gradient or moment buffer.
    pub fn zeros_like(&self) -> Self {
        let zl1 = |a: &Array1<F>| Array1::zeros(a.raw_dim());
        let zl2 = |a: &Array2<F>| Array2::zeros(a.raw_dim());
        Self {
            token_embedding: zl2(&self.token_embedding),
            position_embedding: zl2(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: zl1(&l.ln1_gain),
                    ln1_bias: zl1(&l.ln1_bias),
                    wq: zl2(&l.wq),
                    bq: zl1(&l.bq),
                    wk: zl2(&l.wk),
                    bk: zl1(&l.bk),
                    wv: zl2(&l.wv),
                    bv: zl1(&l.bv),
                    wo: zl2(&l.wo),
                    bo: zl1(&l.bo),
                    ln2_gain: zl1(&l.ln2_gain),
                    ln2_bias: zl1(&l.ln2_bias),
                    w1: zl2(&l.w1),
                    b1: zl1(&l.b1),
                    w2: zl2(&l.w2),
                    b2: zl1(&l.b2),
                })
                .collect(),
            final_ln_gain: zl1(&self.final_ln_gain),
            final_ln_bias: zl1(&self.final_ln_bias),
            mlm: MlmHead {
                transform_w: zl2(&self.mlm.transform_w),
                transform_b: zl1(&self.mlm.transform_b),
                ln_gain: zl1(&self.mlm.ln_gain),
                ln_bias: zl1(&self.mlm.ln_bias),
                out_bias: zl1(&self.mlm.out_bias),
            },
        }
    }

    /// Immutable views of every tensor, in the stable manifest order.
    pub fn tensor_views(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out: Vec<(String, ArrayViewD<'_, F>)> = vec![
            ("token_embedding".into(), self.token_embedding.view().into_dyn()),
            ("position_embedding".into(), self.position_embedding.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), l.ln1_gain.view().into_dyn()));
            out.push((format!("layer{i}.ln1.bias"), l.ln1_bias.view().into_dyn()));
            out.push((format!("layer{i}.attn.wq"), l.wq.view().into_dyn()));
            out.push((format!("layer{i}.attn.bq"), l.bq.view().into_dyn()));
            out.push((format!("layer{i}.attn.wk"), l.wk.view().into_dyn()));
            out.push((format!("layer{i}.attn.bk"), l.bk.view().into_dyn()));
            out.push((format!("layer{i}.attn.wv"), l.wv.view().into_dyn()));
            out.push((format!("layer{i}.attn.bv"), l.bv.view().into_dyn()));
            out.push((format!("layer{i}.attn.wo"), l.wo.view().into_dyn()));
            out.push((format!("layer{i}.attn.bo"), l.bo.view().into_dyn()));
            out.push((format!("layer{i}.ln2.gain"), l.ln2_gain.view().into_dyn()));
            out.push((format!("layer{i}.ln2.bias"), l.ln2_bias.view().into_dyn()));
            out.push((format!("layer{i}.ffn.w1"), l.w1.view().into_dyn()));
            out.push((format!("layer{i}.ffn.b1"), l.b1.view().into_dyn()));
            out.push((format!("layer{i}.ffn.w2"), l.w2.view().into_dyn()));
            out.push((format!("layer{i}.ffn.b2"), l.b2.view().into_dyn()));
        }
        out.push(("final_ln.gain".into(), self.final_ln_gain.view().into_dyn()));
        out.push(("final_ln.bias".into(), self.final_ln_bias.view().into_dyn()));
        out.push(("mlm.transform.w".into(), self.mlm.transform_w.view().into_dyn()));
        out.push(("mlm.transform.b".into(), self.mlm.transform_b.view().into_dyn()));
        out.push(("mlm.ln.gain".into(), self.mlm.ln_gain.view().into_dyn()));
        out.push(("mlm.ln.bias".into(), self.mlm.ln_bias.view().into_dyn()));
        out.push(("mlm.out_bias".into(), self.mlm.out_bias.view().into_dyn()));
        out
    }

    /// Mutable views in the same order as [`Self::tensor_views`].
    pub fn tensor_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, F>)> = vec![
            ("token_embedding".into(), self.token_embedding.view_mut().into_dyn()),
            ("position_embedding".into(), self.position_embedding.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), l.ln1_gain.view_mut().into_dyn()));
            out.push((format!("layer{i}.ln1.bias"), l.ln1_bias.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wq"), l.wq.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.bq"), l.bq.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wk"), l.wk.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.bk"), l.bk.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wv"), l.wv.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.bv"), l.bv.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.wo"), l.wo.view_mut().into_dyn()));
            out.push((format!("layer{i}.attn.bo"), l.bo.view_mut().into_dyn()));
            out.push((format!("layer{i}.ln2.gain"), l.ln2_gain.view_mut().into_dyn()));
            out.push((format!("layer{i}.ln2.bias"), l.ln2_bias.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.w1"), l.w1.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.b1"), l.b1.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.w2"), l.w2.view_mut().into_dyn()));
            out.push((format!("layer{i}.ffn.b2"), l.b2.view_mut().into_dyn()));
        }
        out.push(("final_ln.gain".into(), self.final_ln_gain.view_mut().into_dyn()));
        out.push(("final_ln.bias".into(), self.final_ln_bias.view_mut().into_dyn()));
        out.push(("mlm.transform.w".into(), self.mlm.transform_w.view_mut().into_dyn()));
        out.push(("mlm.transform.b".into(), self.mlm.transform_b.view_mut().into_dyn()));
        out.push(("mlm.ln.gain".into(), self.mlm.ln_gain.view_mut().into_dyn()));
        out.push(("mlm.ln.bias".into(), self.mlm.ln_bias.view_mut().into_dyn()));
        out.push(("mlm.out_bias".into(), self.mlm.out_bias.view_mut().into_dyn()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensor_views().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Order-stable f64 sum over all tensors; cheap fingerprint for
    /// "these parameters did not change" assertions.
    pub fn checksum(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, t) in self.tensor_views() {
            for v in t.iter() {
                acc += v.to_f64().expect("finite parameter");
            }
        }
        acc
    }

    pub fn num_params(&self) -> usize {
        self.tensor_views().iter().map(|(_, t)| t.len()).sum()
    }

    /// Global L2 norm across all tensors, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, t) in self.tensor_views() {
            for v in t.iter() {
                let x = v.to_f64().expect("finite value");
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Multiply every tensor by a constant (gradient clipping / loss
    /// scaling).
    pub fn scale_all(&mut self, factor: F) {
        for (_, mut t) in self.tensor_views_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { vocab_size: 64, max_len: 8, hidden: 8, layers: 2, heads: 2, ..Default::default() }
    }

    #[test]
    fn init_shapes_and_values() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::<f32>::init(&cfg, &mut rng);
        assert_eq!(p.token_embedding.dim(), (64, 8));
        assert_eq!(p.position_embedding.dim(), (8, 8));
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[0].w1.dim(), (8, 32));
        assert_eq!(p.layers[0].w2.dim(), (32, 8));
        assert_eq!(p.mlm.out_bias.len(), 64);
        assert!(p.layers[0].ln1_gain.iter().all(|&g| g == 1.0));
        assert!(p.layers[0].bq.iter().all(|&b| b == 0.0));
        assert!(p.all_finite());
    }

    #[test]
    fn tensor_enumeration_is_stable_and_complete() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::<f64>::init(&cfg, &mut rng);
        let views = p.tensor_views();
        // 2 embeddings + 16 per layer × 2 + 2 final LN + 5 head tensors
        assert_eq!(views.len(), 2 + 16 * 2 + 2 + 5);
        assert_eq!(views[0].0, "token_embedding");
        assert_eq!(views.last().unwrap().0, "mlm.out_bias");
        let counted: usize = views.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(counted, p.num_params());
        // mutable enumeration pairs up with the immutable one
        let mut q = p.clone();
        let names_mut: Vec<String> = q.tensor_views_mut().into_iter().map(|(n, _)| n).collect();
        let names: Vec<String> = views.into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn same_seed_reproduces_init() {
        let cfg = small_cfg();
        let a = EncoderParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = EncoderParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let c = EncoderParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(10));
        assert_ne!(a, c);
    }

    #[test]
    fn scale_and_norm() {
        let cfg = small_cfg();
        let mut p = EncoderParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let n0 = p.global_norm();
        p.scale_all(2.0);
        assert!((p.global_norm() - 2.0 * n0).abs() < 1e-9 * n0.max(1.0));
        let z = p.zeros_like();
        assert_eq!(z.global_norm(), 0.0);
        assert_eq!(z.num_params(), p.num_params());
    }
}
