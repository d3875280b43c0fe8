//! Fine-tuning: a two-layer softmax head over the flow representations,
//! trained end-to-end with both encoders (or head-only when the encoders
//! are frozen), keeping the epoch with the best validation macro-F1.

use ndarray::{s as nds, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classify::{evaluate, flow_representation, ClassifyError, FlowSample};
use crate::encoder::{
    backward_from_hidden, dgelu, encode_batch, fill_truncated_normal, gelu, s, Dropout,
    EncoderConfig, EncoderParams, ForwardTrace, Scalar,
};
use crate::masking::MaskSeed;
use crate::tokenize::{tokenize_bytes, TokenSequence};
use crate::training::adam::{AdamState, BETA1, BETA2, EPS};
use crate::training::Checkpoint;

/// Fine-tuning hyperparameters. Adam with the same fixed moments as
/// pre-training, constant learning rate, gradients clipped to a joint
/// global norm of 1.0 across head and encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Width of the head's hidden layer.
    pub head_hidden: usize,
    /// Leading packets of a flow that enter its representation.
    pub n_max_packets: usize,
    /// Train the head only, leaving both encoders untouched.
    pub freeze_encoders: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2e-5,
            batch_size: 8,
            head_hidden: 128,
            n_max_packets: super::N_MAX_PACKETS,
            freeze_encoders: false,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.batch_size == 0 {
            return Err(ClassifyError::Config("batch_size must be positive".into()));
        }
        if self.head_hidden == 0 {
            return Err(ClassifyError::Config("head_hidden must be positive".into()));
        }
        if self.n_max_packets == 0 {
            return Err(ClassifyError::Config("n_max_packets must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(ClassifyError::Config("lr must be positive and finite".into()));
        }
        Ok(())
    }
}

// Seed-stream tags for fine-tuning randomness (head init, epoch shuffles,
// dropout), kept disjoint from every pre-training stream.
const HEAD_INIT_STREAM: u64 = 0x46_4845_4144; // "FHEAD"
const SHUFFLE_STREAM: u64 = 0x46_5348_5546; // "FSHUF"
const FT_DROPOUT_HEADER: u64 = 0x46_4452_4f48; // "FDROH"
const FT_DROPOUT_PAYLOAD: u64 = 0x46_4452_4f50; // "FDROP"

/// Two affine layers with a GELU between and softmax on top.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F: Scalar> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// Activations of one head forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace<F: Scalar> {
    pub z1: Array2<F>,
    pub g: Array2<F>,
    pub logits: Array2<F>,
    pub probs: Array2<F>,
}

impl<F: Scalar> ClassifierHead<F> {
    /// First layer truncated-normal, output layer exactly zero: logits
    /// start at the uniform distribution, so at the very small fine-tuning
    /// rate every update moves the argmax with class signal instead of
    /// having to first cancel init noise.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut w1 = Array2::zeros((input_dim, hidden));
        fill_truncated_normal(w1.iter_mut(), 0.02, rng);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, classes)),
            b2: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> HeadTrace<F> {
        let mut z1 = x.dot(&self.w1);
        for mut row in z1.rows_mut() {
            row += &self.b1;
        }
        let g = z1.mapv(gelu);
        let mut logits = g.dot(&self.w2);
        for mut row in logits.rows_mut() {
            row += &self.b2;
        }
        // Row-stable softmax.
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|l| (l - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
            debug_assert!(
                (row.sum().to_f64().unwrap() - 1.0).abs() < 1e-6,
                "softmax row does not normalize"
            );
        }
        HeadTrace { z1, g, logits, probs }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    fn views(&self) -> [ArrayViewD<'_, F>; 4] {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
        ]
    }

    fn views_mut(&mut self) -> [ArrayViewMutD<'_, F>; 4] {
        [
            self.w1.view_mut().into_dyn(),
            self.b1.view_mut().into_dyn(),
            self.w2.view_mut().into_dyn(),
            self.b2.view_mut().into_dyn(),
        ]
    }

    fn sum_squares(&self) -> f64 {
        self.views()
            .iter()
            .flat_map(|v| v.iter())
            .map(|&x| {
                let x = x.to_f64().unwrap();
                x * x
            })
            .sum()
    }

    fn scale_all(&mut self, factor: F) {
        for mut v in self.views_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }
}

/// Adam moments for the classifier head, same constants as the encoders.
struct HeadAdam<F: Scalar> {
    m: ClassifierHead<F>,
    v: ClassifierHead<F>,
    t: u64,
}

impl<F: Scalar> HeadAdam<F> {
    fn new(head: &ClassifierHead<F>) -> Self {
        Self { m: head.zeros_like(), v: head.zeros_like(), t: 0 }
    }

    fn step(&mut self, head: &mut ClassifierHead<F>, grads: &ClassifierHead<F>, lr: f64) {
        self.t += 1;
        let b1 = s::<F>(BETA1);
        let b2 = s::<F>(BETA2);
        let c1 = s::<F>(1.0 - BETA1);
        let c2 = s::<F>(1.0 - BETA2);
        let alpha = s::<F>(lr / (1.0 - BETA1.powi(self.t as i32)));
        let vscale = s::<F>(1.0 / (1.0 - BETA2.powi(self.t as i32)));
        let eps = s::<F>(EPS);
        let mut ps = head.views_mut();
        let gs = grads.views();
        let mut ms = self.m.views_mut();
        let mut vs = self.v.views_mut();
        for i in 0..4 {
            Zip::from(&mut ps[i]).and(&gs[i]).and(&mut ms[i]).and(&mut vs[i]).for_each(
                |p, &g, mm, vv| {
                    *mm = b1 * *mm + c1 * g;
                    *vv = b2 * *vv + c2 * g * g;
                    *p = *p - alpha * *mm / ((*vv * vscale).sqrt() + eps);
                },
            );
        }
    }
}

/// A fine-tuned classifier: both encoders plus the head, and how a flow is
/// reduced to its input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedModel<F: Scalar> {
    pub header_config: EncoderConfig,
    pub payload_config: EncoderConfig,
    pub theta_h: EncoderParams<F>,
    pub theta_p: EncoderParams<F>,
    pub head: ClassifierHead<F>,
    pub n_max_packets: usize,
}

/// One epoch of the fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's samples.
    pub train_loss: f64,
    pub val_macro_f1: Option<f64>,
}

/// Fine-tuning result: the retained (best-validation) model plus the
/// training trajectory.
#[derive(Debug, Clone)]
pub struct FinetuneOutput<F: Scalar> {
    pub model: FinetunedModel<F>,
    /// Epoch whose weights were retained; 0 is the initialized model.
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// One flow, tokenized: one header and one payload sequence per kept
/// packet (an empty payload gives the bare-CLS sequence).
struct FlowTokens {
    hdr: Vec<TokenSequence>,
    pay: Vec<TokenSequence>,
    label: u32,
}

fn tokenize_flows(
    samples: &[FlowSample],
    hdr_cfg: &EncoderConfig,
    pay_cfg: &EncoderConfig,
    n_max: usize,
) -> Vec<FlowTokens> {
    samples
        .iter()
        .map(|sample| {
            assert!(!sample.flow.packets.is_empty(), "a flow has at least one packet");
            let kept = &sample.flow.packets[..sample.flow.packets.len().min(n_max)];
            FlowTokens {
                hdr: kept.iter().map(|p| tokenize_bytes(&p.header_bytes, hdr_cfg.max_len)).collect(),
                pay: kept.iter().map(|p| tokenize_bytes(&p.payload_bytes, pay_cfg.max_len)).collect(),
                label: sample.label,
            }
        })
        .collect()
}

/// Both encoder forwards for a batch of flows plus the per-flow mean
/// vectors. `starts[i]` is the index of flow `i`'s first packet in the
/// flattened sequence batch.
struct BatchForward<F: Scalar> {
    x: Array2<F>,
    trace_h: ForwardTrace<F>,
    trace_p: ForwardTrace<F>,
    starts: Vec<usize>,
}

fn batch_forward<F: Scalar>(
    theta_h: &EncoderParams<F>,
    theta_p: &EncoderParams<F>,
    hdr_cfg: &EncoderConfig,
    pay_cfg: &EncoderConfig,
    flows: &[&FlowTokens],
    drop_h: Option<Dropout<'_>>,
    drop_p: Option<Dropout<'_>>,
) -> Result<BatchForward<F>, ClassifyError> {
    let mut hdr_seqs = Vec::new();
    let mut pay_seqs = Vec::new();
    let mut starts = Vec::with_capacity(flows.len());
    for f in flows {
        starts.push(hdr_seqs.len());
        hdr_seqs.extend(f.hdr.iter().cloned());
        pay_seqs.extend(f.pay.iter().cloned());
    }
    let trace_h = encode_batch(theta_h, hdr_cfg, &hdr_seqs, drop_h)?;
    let trace_p = encode_batch(theta_p, pay_cfg, &pay_seqs, drop_p)?;

    let dh = hdr_cfg.hidden;
    let dp = pay_cfg.hidden;
    let mut x = Array2::<F>::zeros((flows.len(), dh + dp));
    for (i, f) in flows.iter().enumerate() {
        let hv: Vec<Array1<F>> = (0..f.hdr.len())
            .map(|k| trace_h.hidden_row(starts[i] + k, 0).to_owned())
            .collect();
        let pv: Vec<Array1<F>> = (0..f.pay.len())
            .map(|k| trace_p.hidden_row(starts[i] + k, 0).to_owned())
            .collect();
        // Packets were already truncated to n_max at tokenize time.
        x.slice_mut(nds![i, ..dh]).assign(&flow_representation(&hv, hv.len()));
        x.slice_mut(nds![i, dh..]).assign(&flow_representation(&pv, pv.len()));
    }
    Ok(BatchForward { x, trace_h, trace_p, starts })
}

/// Mean cross-entropy and its logits gradient `(softmax − onehot)/B`,
/// computed from the logits for numerical stability.
fn cross_entropy<F: Scalar>(trace: &HeadTrace<F>, labels: &[u32]) -> (f64, Array2<F>) {
    let b = labels.len();
    let mut dlogits = trace.probs.clone();
    let inv_b = s::<F>(1.0 / b as f64);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = trace.logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max
            + row.iter().map(|&l| (l - max).exp()).sum::<F>().ln();
        loss += (lse - row[y as usize]).to_f64().unwrap();
        dlogits[[i, y as usize]] -= F::one();
    }
    dlogits.mapv_inplace(|v| v * inv_b);
    (loss / b as f64, dlogits)
}

/// Loss and gradients for one batch of flows. Encoder gradients are `None`
/// when frozen.
#[allow(clippy::type_complexity)]
fn batch_gradients<F: Scalar>(
    theta_h: &EncoderParams<F>,
    theta_p: &EncoderParams<F>,
    head: &ClassifierHead<F>,
    hdr_cfg: &EncoderConfig,
    pay_cfg: &EncoderConfig,
    flows: &[&FlowTokens],
    labels: &[u32],
    drop_h: Option<Dropout<'_>>,
    drop_p: Option<Dropout<'_>>,
    freeze_encoders: bool,
) -> Result<(f64, ClassifierHead<F>, Option<(EncoderParams<F>, EncoderParams<F>)>), ClassifyError>
{
    let fwd = batch_forward(theta_h, theta_p, hdr_cfg, pay_cfg, flows, drop_h, drop_p)?;
    let trace = head.forward(&fwd.x);
    let (loss, dlogits) = cross_entropy(&trace, labels);

    let mut hgrads = head.zeros_like();
    hgrads.w2 = trace.g.t().dot(&dlogits);
    hgrads.b2 = dlogits.sum_axis(Axis(0));
    let dg = dlogits.dot(&head.w2.t());
    let mut dz1 = dg;
    dz1.zip_mut_with(&trace.z1, |dv, &z| *dv *= dgelu(z));
    hgrads.w1 = fwd.x.t().dot(&dz1);
    hgrads.b1 = dz1.sum_axis(Axis(0));

    let enc_grads = if freeze_encoders {
        None
    } else {
        let dx = dz1.dot(&head.w1.t());
        let dh = hdr_cfg.hidden;
        let mut dhid_h = Array2::<F>::zeros(fwd.trace_h.hidden.raw_dim());
        let mut dhid_p = Array2::<F>::zeros(fwd.trace_p.hidden.raw_dim());
        for (i, f) in flows.iter().enumerate() {
            let inv_n = s::<F>(1.0 / f.hdr.len() as f64);
            for k in 0..f.hdr.len() {
                let seq = fwd.starts[i] + k;
                let mut row_h = dhid_h.row_mut(seq * fwd.trace_h.l_eff);
                row_h.scaled_add(inv_n, &dx.slice(nds![i, ..dh]));
                let mut row_p = dhid_p.row_mut(seq * fwd.trace_p.l_eff);
                row_p.scaled_add(inv_n, &dx.slice(nds![i, dh..]));
            }
        }
        let gh = backward_from_hidden(theta_h, hdr_cfg, &fwd.trace_h, &dhid_h);
        let gp = backward_from_hidden(theta_p, pay_cfg, &fwd.trace_p, &dhid_p);
        Some((gh, gp))
    };
    Ok((loss, hgrads, enc_grads))
}

/// Scale head and encoder gradients together so their joint global L2
/// norm is at most `max_norm`.
fn clip_joint<F: Scalar>(
    hgrads: &mut ClassifierHead<F>,
    enc: &mut Option<(EncoderParams<F>, EncoderParams<F>)>,
    max_norm: f64,
) {
    let mut ss = hgrads.sum_squares();
    if let Some((gh, gp)) = enc {
        ss += gh.global_norm().powi(2) + gp.global_norm().powi(2);
    }
    let norm = ss.sqrt();
    if norm.is_finite() && norm > max_norm {
        let factor = s::<F>(max_norm / norm);
        hgrads.scale_all(factor);
        if let Some((gh, gp)) = enc {
            gh.scale_all(factor);
            gp.scale_all(factor);
        }
    }
}

fn predict_tokens<F: Scalar>(
    model: &FinetunedModel<F>,
    flows: &[FlowTokens],
) -> Result<Vec<u32>, ClassifyError> {
    let mut out = Vec::with_capacity(flows.len());
    for chunk in flows.chunks(64) {
        let refs: Vec<&FlowTokens> = chunk.iter().collect();
        let fwd = batch_forward(
            &model.theta_h,
            &model.theta_p,
            &model.header_config,
            &model.payload_config,
            &refs,
            None,
            None,
        )?;
        let trace = model.head.forward(&fwd.x);
        for row in trace.probs.rows() {
            let mut best = 0usize;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

/// Classify flows with a fine-tuned model (evaluation mode, deterministic).
pub fn predict_labels<F: Scalar>(
    model: &FinetunedModel<F>,
    samples: &[FlowSample],
) -> Result<Vec<u32>, ClassifyError> {
    let flows = tokenize_flows(
        samples,
        &model.header_config,
        &model.payload_config,
        model.n_max_packets,
    );
    predict_tokens(model, &flows)
}

fn val_macro_f1<F: Scalar>(
    model: &FinetunedModel<F>,
    val: &[FlowTokens],
    classes: usize,
) -> Result<Option<f64>, ClassifyError> {
    if val.is_empty() {
        return Ok(None);
    }
    let pred = predict_tokens(model, val)?;
    let truth: Vec<u32> = val.iter().map(|f| f.label).collect();
    Ok(Some(evaluate(&pred, &truth, classes)?.macro_f1))
}

/// Fine-tune head and encoders on labeled flows, retaining the epoch with
/// the best validation macro-F1 (the initialized model counts as epoch 0,
/// so a run that never improves returns it). With `epochs = 0` the
/// initialized model is returned untrained.
pub fn finetune<F: Scalar>(
    cfg: &FinetuneConfig,
    train: &[FlowSample],
    val: &[FlowSample],
    ckpt: &Checkpoint<F>,
) -> Result<FinetuneOutput<F>, ClassifyError> {
    cfg.validate()?;
    let mut distinct: Vec<u32> = train.iter().map(|s| s.label).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ClassifyError::DegenerateDataset(distinct.len()));
    }
    let classes = train
        .iter()
        .chain(val)
        .map(|s| s.label as usize + 1)
        .max()
        .expect("train is non-empty");

    let hdr_cfg = &ckpt.header_config;
    let pay_cfg = &ckpt.payload_config;
    let train_tokens = tokenize_flows(train, hdr_cfg, pay_cfg, cfg.n_max_packets);
    let val_tokens = tokenize_flows(val, hdr_cfg, pay_cfg, cfg.n_max_packets);

    let mut model = FinetunedModel {
        header_config: hdr_cfg.clone(),
        payload_config: pay_cfg.clone(),
        theta_h: ckpt.theta_h.clone(),
        theta_p: ckpt.theta_p.clone(),
        head: ClassifierHead::init(
            hdr_cfg.hidden + pay_cfg.hidden,
            cfg.head_hidden,
            classes,
            &mut MaskSeed::new(cfg.seed, HEAD_INIT_STREAM, 0).rng(),
        ),
        n_max_packets: cfg.n_max_packets,
    };

    let mut best_val = val_macro_f1(&model, &val_tokens, classes)?;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut adam_head = HeadAdam::new(&model.head);
    let mut adam_h = AdamState::new(&model.theta_h);
    let mut adam_p = AdamState::new(&model.theta_p);
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_tokens.len()).collect();
        order.shuffle(&mut MaskSeed::new(cfg.seed, SHUFFLE_STREAM, epoch as u64).rng());

        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let flows: Vec<&FlowTokens> = batch_idx.iter().map(|&i| &train_tokens[i]).collect();
            let labels: Vec<u32> = flows.iter().map(|f| f.label).collect();
            let mut rng_h = MaskSeed::new(cfg.seed, FT_DROPOUT_HEADER, global_step).rng();
            let mut rng_p = MaskSeed::new(cfg.seed, FT_DROPOUT_PAYLOAD, global_step).rng();
            let drop_h = (hdr_cfg.dropout > 0.0)
                .then(|| Dropout { p: hdr_cfg.dropout, rng: &mut rng_h });
            let drop_p = (pay_cfg.dropout > 0.0)
                .then(|| Dropout { p: pay_cfg.dropout, rng: &mut rng_p });
            let (loss, mut hgrads, mut enc_grads) = batch_gradients(
                &model.theta_h,
                &model.theta_p,
                &model.head,
                hdr_cfg,
                pay_cfg,
                &flows,
                &labels,
                drop_h,
                drop_p,
                cfg.freeze_encoders,
            )?;
            clip_joint(&mut hgrads, &mut enc_grads, 1.0);
            adam_head.step(&mut model.head, &hgrads, cfg.lr);
            if let Some((gh, gp)) = enc_grads {
                adam_h.step(&mut model.theta_h, &gh, cfg.lr);
                adam_p.step(&mut model.theta_p, &gp, cfg.lr);
            }
            loss_sum += loss * labels.len() as f64;
            global_step += 1;
        }
        let train_loss = loss_sum / train_tokens.len() as f64;

        let val_f1 = val_macro_f1(&model, &val_tokens, classes)?;
        log.push(EpochLog { epoch, train_loss, val_macro_f1: val_f1 });
        match (val_f1, best_val) {
            (Some(f1), Some(best)) if f1 > best => {
                best_val = Some(f1);
                best_epoch = epoch;
                best_model = model.clone();
            }
            (Some(f1), None) => {
                best_val = Some(f1);
                best_epoch = epoch;
                best_model = model.clone();
            }
            _ => {}
        }
        log::info!(
            "epoch {epoch}/{} train_loss {train_loss:.4} val_macro_f1 {}",
            cfg.epochs,
            val_f1.map_or_else(|| "-".into(), |f| format!("{f:.4}")),
        );
    }

    // Without a validation set there is nothing to select on: keep the
    // final weights.
    let (model, best_epoch) = if val_tokens.is_empty() && cfg.epochs > 0 {
        (model, cfg.epochs)
    } else if cfg.epochs == 0 {
        (model, 0)
    } else {
        (best_model, best_epoch)
    };
    Ok(FinetuneOutput { model, best_epoch, best_val_macro_f1: best_val, log })
}
