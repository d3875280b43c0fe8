//! Flow classification on top of the pre-trained encoders.
//!
//! A packet is represented by the two CLS hidden vectors (header encoder ‖
//! payload encoder), a flow by the mean over its first packets, and flows
//! are classified by a two-layer head with softmax. This module also holds
//! the evaluation metrics and the per-class sample/split protocol.

mod finetune;
mod model_io;

pub use finetune::{
    finetune, predict_labels, ClassifierHead, EpochLog, FinetuneConfig, FinetuneOutput,
    FinetunedModel, HeadTrace,
};
pub use model_io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::encoder::{encode, EncoderConfig, EncoderParams, Scalar};
use crate::ingest::{Flow, PacketRecord};
use crate::masking::MaskSeed;
use crate::tokenize::tokenize_bytes;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("prediction list has {pred} labels but the truth list has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label lists are empty")]
    EmptyLabels,
    #[error("label {label} is outside the {classes}-class range")]
    InvalidLabel { label: u32, classes: usize },
    #[error("training set contains {0} distinct class(es); at least 2 are required")]
    DegenerateDataset(usize),
    #[error("invalid fine-tune config: {0}")]
    Config(String),
    #[error("no class has the minimum of {MIN_FLOWS_PER_CLASS} flows")]
    TooFewFlows,
    #[error("not a classifier model: file does not start with the TRGC magic")]
    BadMagic,
    #[error("classifier model format version {0} is not supported (expected {MODEL_VERSION})")]
    VersionUnsupported(u32),
    #[error("classifier model manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labeled flow, the unit of fine-tuning and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub flow: Flow,
    pub label: u32,
}

/// Smallest class size the split protocol accepts; smaller classes are
/// dropped with a warning.
pub const MIN_FLOWS_PER_CLASS: usize = 10;

/// Most flows kept per class before splitting.
pub const CLASS_CAP: usize = 5000;

/// Default number of leading packets that represent a flow.
pub const N_MAX_PACKETS: usize = 5;

/// One packet's representation: the CLS hidden state of the header encoder
/// concatenated with the CLS hidden state of the payload encoder. An empty
/// payload tokenizes to the bare-CLS sequence, so it still contributes a
/// well-defined vector.
///
/// Panics if the parameter tensors do not match their configs (checkpoint
/// and config travel together, so a mismatch is a programming error).
pub fn packet_representation<F: Scalar>(
    theta_h: &EncoderParams<F>,
    header_cfg: &EncoderConfig,
    theta_p: &EncoderParams<F>,
    payload_cfg: &EncoderConfig,
    rec: &PacketRecord,
) -> Array1<F> {
    let hdr = tokenize_bytes(&rec.header_bytes, header_cfg.max_len);
    let pay = tokenize_bytes(&rec.payload_bytes, payload_cfg.max_len);
    let h = encode(theta_h, header_cfg, &hdr).expect("header params match their config");
    let p = encode(theta_p, payload_cfg, &pay).expect("payload params match their config");
    let mut out = Array1::zeros(header_cfg.hidden + payload_cfg.hidden);
    out.slice_mut(ndarray::s![..header_cfg.hidden]).assign(&h.hidden_row(0, 0));
    out.slice_mut(ndarray::s![header_cfg.hidden..]).assign(&p.hidden_row(0, 0));
    out
}

/// Arithmetic mean of the first `min(len, n_max)` packet vectors in
/// capture order; packets beyond `n_max` never influence the result.
///
/// Panics on an empty list or `n_max == 0`.
pub fn flow_representation<F: Scalar>(vectors: &[Array1<F>], n_max: usize) -> Array1<F> {
    assert!(!vectors.is_empty(), "a flow has at least one packet");
    assert!(n_max >= 1, "n_max must be at least 1");
    let used = &vectors[..vectors.len().min(n_max)];
    let mut mean = Array1::zeros(used[0].len());
    for v in used {
        mean += v;
    }
    mean /= crate::encoder::s::<F>(used.len() as f64);
    mean
}

/// Precision/recall/F1 of one class, with its support (true-label count).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Classification quality report. Macro averages are unweighted means over
/// the classes actually present in the true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[[t, p]]` counts samples of true class `t` predicted `p`.
    pub confusion: Array2<u64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, and F1 from two label lists, with 0/0
/// defined as 0 throughout.
pub fn evaluate(pred: &[u32], truth: &[u32], classes: usize) -> Result<Metrics, ClassifyError> {
    if pred.len() != truth.len() {
        return Err(ClassifyError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(ClassifyError::EmptyLabels);
    }
    let mut confusion = Array2::<u64>::zeros((classes, classes));
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label as usize >= classes {
                return Err(ClassifyError::InvalidLabel { label, classes });
            }
        }
        confusion[[t as usize, p as usize]] += 1;
    }

    let mut per_class = Vec::with_capacity(classes);
    let (mut psum, mut rsum, mut fsum, mut present) = (0.0, 0.0, 0.0, 0u64);
    for c in 0..classes {
        let tp = confusion[[c, c]];
        let support: u64 = confusion.row(c).sum();
        let predicted: u64 = confusion.column(c).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { class: c as u32, precision, recall, f1, support });
        if support > 0 {
            psum += precision;
            rsum += recall;
            fsum += f1;
            present += 1;
        }
    }
    debug_assert!(present > 0, "non-empty labels imply at least one present class");
    Ok(Metrics {
        per_class,
        macro_precision: psum / present as f64,
        macro_recall: rsum / present as f64,
        macro_f1: fsum / present as f64,
        confusion,
    })
}

/// Disjoint train/validation/test sets, plus the labels of any classes
/// dropped for being too small.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSets {
    pub train: Vec<FlowSample>,
    pub val: Vec<FlowSample>,
    pub test: Vec<FlowSample>,
    pub dropped: Vec<u32>,
}

// Stream tag for the split shuffle, disjoint by construction from any
// training-step seed stream ("SPLIT" in ASCII).
const SPLIT_STREAM: u64 = 0x53504C4954;

/// Cap each class at `cap` uniformly sampled flows, then split it
/// train/val/test as floor(0.8·n) / floor(0.1·n) / remainder. Classes with
/// fewer than [`MIN_FLOWS_PER_CLASS`] flows are dropped with a warning;
/// if none survive, that is an error. Membership is a pure function of
/// (seed, input order).
pub fn sample_and_split(
    samples: Vec<FlowSample>,
    cap: usize,
    seed: u64,
) -> Result<SplitSets, ClassifyError> {
    let mut by_class: BTreeMap<u32, Vec<FlowSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut out = SplitSets { train: Vec::new(), val: Vec::new(), test: Vec::new(), dropped: Vec::new() };
    for (label, mut members) in by_class {
        if members.len() < MIN_FLOWS_PER_CLASS {
            log::warn!(
                "dropping class {label}: {} flows is below the minimum of {MIN_FLOWS_PER_CLASS}",
                members.len()
            );
            out.dropped.push(label);
            continue;
        }
        let mut rng = MaskSeed::new(seed, SPLIT_STREAM, label as u64).rng();
        members.shuffle(&mut rng);
        members.truncate(cap);
        let n = members.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let mut rest = members.split_off(n_train);
        let test = rest.split_off(n_val);
        out.train.extend(members);
        out.val.extend(rest);
        out.test.extend(test);
    }
    if out.train.is_empty() {
        return Err(ClassifyError::TooFewFlows);
    }
    Ok(out)
}

/// Write the metrics report: one row per class, then the macro row.
pub fn write_metrics_csv<W: std::io::Write>(out: W, m: &Metrics) -> Result<(), ClassifyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "precision", "recall", "f1", "support"]).map_err(csv_io)?;
    for c in &m.per_class {
        w.write_record([
            c.class.to_string(),
            format!("{:.6}", c.precision),
            format!("{:.6}", c.recall),
            format!("{:.6}", c.f1),
            c.support.to_string(),
        ])
        .map_err(csv_io)?;
    }
    let total: u64 = m.per_class.iter().map(|c| c.support).sum();
    w.write_record([
        "macro".to_string(),
        format!("{:.6}", m.macro_precision),
        format!("{:.6}", m.macro_recall),
        format!("{:.6}", m.macro_f1),
        total.to_string(),
    ])
    .map_err(csv_io)?;
    w.flush()?;
    Ok(())
}

/// Write the confusion matrix: header `true\pred,0,1,...`, one row per
/// true class.
pub fn write_confusion_csv<W: std::io::Write>(out: W, m: &Metrics) -> Result<(), ClassifyError> {
    let mut w = csv::Writer::from_writer(out);
    let classes = m.confusion.nrows();
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..classes).map(|c| c.to_string()));
    w.write_record(&header).map_err(csv_io)?;
    for t in 0..classes {
        let mut row = vec![t.to_string()];
        row.extend(m.confusion.row(t).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> ClassifyError {
    ClassifyError::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Precision;
    use crate::ingest::{FlowKey, Timestamp};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::net::{IpAddr, Ipv4Addr};

    fn fixture_flow(label: u32, idx: u32) -> FlowSample {
        let (flow_key, direction) = FlowKey::canonical(
            IpAddr::V4(Ipv4Addr::new(10, 0, (idx >> 8) as u8, idx as u8)),
            40_000 + (idx % 1000) as u16,
            IpAddr::V4(Ipv4Addr::new(192, 168, 0, 1)),
            443,
            6,
        );
        let packet = PacketRecord {
            flow_key: flow_key.clone(),
            direction,
            header_bytes: vec![label as u8; 28],
            payload_bytes: vec![idx as u8, label as u8],
            capture_ts: Timestamp::new(idx as u64, 0),
        };
        FlowSample { flow: Flow { key: flow_key, packets: vec![packet], label: Some(label) }, label }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = [0u32, 1, 2, 0, 1, 2];
        let m = evaluate(&truth, &truth, 3).unwrap();
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_recall, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        for c in &m.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn hand_enumerated_two_class_case() {
        // true [0,0,1,1], pred [0,0,0,0]: class 0 has P=0.5, R=1, F1=2/3;
        // class 1 is all zeros; macro-F1 = 1/3.
        let m = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        let c0 = m.per_class[0];
        assert_eq!(c0.precision, 0.5);
        assert_eq!(c0.recall, 1.0);
        assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15);
        let c1 = m.per_class[1];
        assert_eq!((c1.precision, c1.recall, c1.f1), (0.0, 0.0, 0.0));
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.confusion, ndarray::array![[2, 0], [2, 0]].mapv(|v: i32| v as u64));
    }

    #[test]
    fn macro_average_ignores_classes_absent_from_truth() {
        // Class 2 never appears in the truth: it must not dilute the
        // macro average even though the model predicts it once.
        let m = evaluate(&[0, 2, 1, 1], &[0, 0, 1, 1], 3).unwrap();
        let c0 = m.per_class[0];
        let c1 = m.per_class[1];
        assert!((m.macro_f1 - (c0.f1 + c1.f1) / 2.0).abs() < 1e-15);
        assert!((m.macro_precision - (c0.precision + c1.precision) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_and_empty_lists_are_rejected() {
        assert!(matches!(
            evaluate(&[0, 1], &[0], 2),
            Err(ClassifyError::LengthMismatch { pred: 2, truth: 1 })
        ));
        assert!(matches!(evaluate(&[], &[], 2), Err(ClassifyError::EmptyLabels)));
        assert!(matches!(
            evaluate(&[5], &[0], 2),
            Err(ClassifyError::InvalidLabel { label: 5, classes: 2 })
        ));
    }

    #[test]
    fn metrics_match_a_brute_force_oracle_on_random_labelings() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC1A5);
        for _ in 0..1000 {
            let classes = rng.gen_range(2..=10usize);
            let len = rng.gen_range(1..=200usize);
            let truth: Vec<u32> = (0..len).map(|_| rng.gen_range(0..classes) as u32).collect();
            let pred: Vec<u32> = (0..len).map(|_| rng.gen_range(0..classes) as u32).collect();
            let m = evaluate(&pred, &truth, classes).unwrap();

            // Brute force: count tp/fp/fn by scanning the lists per class.
            let (mut ps, mut rs, mut fs, mut present) = (0.0, 0.0, 0.0, 0usize);
            for c in 0..classes as u32 {
                let tp = pred
                    .iter()
                    .zip(&truth)
                    .filter(|(&p, &t)| p == c && t == c)
                    .count() as f64;
                let fp = pred
                    .iter()
                    .zip(&truth)
                    .filter(|(&p, &t)| p == c && t != c)
                    .count() as f64;
                let fnn = pred
                    .iter()
                    .zip(&truth)
                    .filter(|(&p, &t)| p != c && t == c)
                    .count() as f64;
                let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
                let rec = if tp + fnn == 0.0 { 0.0 } else { tp / (tp + fnn) };
                let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
                let got = m.per_class[c as usize];
                assert_eq!(got.precision, prec);
                assert_eq!(got.recall, rec);
                assert_eq!(got.f1, f1);
                if truth.contains(&c) {
                    ps += prec;
                    rs += rec;
                    fs += f1;
                    present += 1;
                }
            }
            assert_eq!(m.macro_precision, ps / present as f64);
            assert_eq!(m.macro_recall, rs / present as f64);
            assert_eq!(m.macro_f1, fs / present as f64);
            // Confusion rows sum to supports.
            for c in 0..classes {
                let support = truth.iter().filter(|&&t| t == c as u32).count() as u64;
                assert_eq!(m.confusion.row(c).sum(), support);
            }
        }
    }

    #[test]
    fn relabeling_both_lists_keeps_macro_metrics() {
        let truth = [0u32, 0, 1, 2, 1, 0, 2, 2, 2];
        let pred = [0u32, 1, 1, 2, 0, 0, 2, 1, 2];
        let m1 = evaluate(&pred, &truth, 3).unwrap();
        // Permute labels 0→2, 1→0, 2→1 on both sides.
        let perm = |l: u32| [2u32, 0, 1][l as usize];
        let truth2: Vec<u32> = truth.iter().map(|&l| perm(l)).collect();
        let pred2: Vec<u32> = pred.iter().map(|&l| perm(l)).collect();
        let m2 = evaluate(&pred2, &truth2, 3).unwrap();
        assert!((m1.macro_f1 - m2.macro_f1).abs() < 1e-15);
        assert!((m1.macro_precision - m2.macro_precision).abs() < 1e-15);
        assert!((m1.macro_recall - m2.macro_recall).abs() < 1e-15);
    }

    #[test]
    fn split_respects_cap_ratio_disjointness_and_minimum_for_twenty_seeds() {
        // Class 0: 6000 flows (capped to 5000 → 4000/500/500).
        // Class 1: 100 flows (80/10/10). Class 2: 10 flows (8/1/1).
        // Class 3: 9 flows — dropped.
        let mut samples = Vec::new();
        for i in 0..6000 {
            samples.push(fixture_flow(0, i));
        }
        for i in 0..100 {
            samples.push(fixture_flow(1, 100_000 + i));
        }
        for i in 0..10 {
            samples.push(fixture_flow(2, 200_000 + i));
        }
        for i in 0..9 {
            samples.push(fixture_flow(3, 300_000 + i));
        }

        for seed in 1..=20u64 {
            let split = sample_and_split(samples.clone(), CLASS_CAP, seed).unwrap();
            assert_eq!(split.dropped, vec![3]);
            let count = |set: &[FlowSample], label: u32| {
                set.iter().filter(|s| s.label == label).count()
            };
            assert_eq!(
                (count(&split.train, 0), count(&split.val, 0), count(&split.test, 0)),
                (4000, 500, 500)
            );
            assert_eq!(
                (count(&split.train, 1), count(&split.val, 1), count(&split.test, 1)),
                (80, 10, 10)
            );
            assert_eq!(
                (count(&split.train, 2), count(&split.val, 2), count(&split.test, 2)),
                (8, 1, 1)
            );
            // Disjointness via the unique payload bytes of each fixture
            // flow's single packet.
            let key = |s: &FlowSample| {
                (s.label, s.flow.packets[0].payload_bytes.clone(), s.flow.key.clone())
            };
            let mut seen = std::collections::HashSet::new();
            for s in split.train.iter().chain(&split.val).chain(&split.test) {
                assert!(seen.insert(format!("{:?}", key(s))), "sets overlap at {:?}", key(s));
            }
        }

        // Same seed twice → identical membership; different seeds differ.
        let a = sample_and_split(samples.clone(), CLASS_CAP, 7).unwrap();
        let b = sample_and_split(samples.clone(), CLASS_CAP, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_and_split(samples, CLASS_CAP, 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_with_no_viable_class_is_an_error() {
        let samples: Vec<FlowSample> = (0..5).map(|i| fixture_flow(0, i)).collect();
        assert!(matches!(
            sample_and_split(samples, CLASS_CAP, 1),
            Err(ClassifyError::TooFewFlows)
        ));
    }

    #[test]
    fn flow_representation_means_first_five_only() {
        let v = |x: f32| Array1::from_elem(4, x);
        // Single vector → identity.
        assert_eq!(flow_representation(&[v(3.0)], 5), v(3.0));
        // Two identical vectors → the same vector exactly.
        assert_eq!(flow_representation(&[v(1.25), v(1.25)], 5), v(1.25));
        // Seven packets: only the first five count.
        let vecs: Vec<_> = (1..=7).map(|i| v(i as f32)).collect();
        let got = flow_representation(&vecs, 5);
        assert_eq!(got, v(3.0)); // mean of 1..=5
        // Changing packets beyond N_max has no effect.
        let mut tail_changed = vecs.clone();
        tail_changed[6] = v(100.0);
        assert_eq!(flow_representation(&tail_changed, 5), got);
    }

    #[test]
    fn packet_representation_is_deterministic_and_split_by_encoder() {
        let hdr_cfg = EncoderConfig {
            vocab_size: 65541,
            max_len: 16,
            hidden: 8,
            layers: 1,
            heads: 2,
            dropout: 0.1, // ignored: representations run in eval mode
            precision: Precision::F32,
        };
        let pay_cfg = EncoderConfig { max_len: 8, hidden: 4, ..hdr_cfg.clone() };
        let theta_h = EncoderParams::<f32>::init(&hdr_cfg, &mut MaskSeed::new(1, 0, 0).rng());
        let theta_p = EncoderParams::<f32>::init(&pay_cfg, &mut MaskSeed::new(2, 0, 0).rng());
        let sample = fixture_flow(1, 42);
        let rec = &sample.flow.packets[0];

        let a = packet_representation(&theta_h, &hdr_cfg, &theta_p, &pay_cfg, rec);
        let b = packet_representation(&theta_h, &hdr_cfg, &theta_p, &pay_cfg, rec);
        assert_eq!(a.len(), hdr_cfg.hidden + pay_cfg.hidden);
        assert_eq!(a, b);

        // Zeroing the payload token embeddings may only change the payload
        // half of the vector.
        let mut zeroed = theta_p.clone();
        zeroed.token_embedding.fill(0.0);
        let c = packet_representation(&theta_h, &hdr_cfg, &zeroed, &pay_cfg, rec);
        assert_eq!(a.slice(ndarray::s![..hdr_cfg.hidden]), c.slice(ndarray::s![..hdr_cfg.hidden]));
        assert_ne!(a.slice(ndarray::s![hdr_cfg.hidden..]), c.slice(ndarray::s![hdr_cfg.hidden..]));

        // An empty payload is still a valid (bare-CLS) input.
        let mut ack = rec.clone();
        ack.payload_bytes.clear();
        let d = packet_representation(&theta_h, &hdr_cfg, &theta_p, &pay_cfg, &ack);
        assert_eq!(d.len(), a.len());
        assert!(d.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn metrics_and_confusion_csv_shapes() {
        let m = evaluate(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4); // header + 2 classes + macro
        assert_eq!(lines[0], "class,precision,recall,f1,support");
        assert!(lines[3].starts_with("macro,"));

        let mut buf = Vec::new();
        write_confusion_csv(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,2,0");
        assert_eq!(lines[2], "1,2,0");
    }
}
