//! `trage evaluate`: score predictions against truth, either by running a
//! fine-tuned model over a labeled manifest or from two plain label files.

use std::fs::File;
use std::path::Path;

use anyhow::{Context, Result};

use trage::classify::{
    evaluate, load_model, predict_labels, write_confusion_csv, write_metrics_csv,
};
use trage::encoder::{Precision, Scalar};

use crate::config::RunConfig;
use crate::lock::DirLock;
use crate::manifest::{load_label_file, load_labeled_flows};

pub enum EvalInput<'a> {
    /// Run a model over every flow a manifest lists.
    Model { model: &'a Path, manifest: &'a Path },
    /// Compare two files of one-integer-per-line labels.
    Files { predictions: &'a Path, labels: &'a Path },
}

pub fn run(cfg: &RunConfig, input: EvalInput<'_>) -> Result<()> {
    let dir = &cfg.output_dir;
    let _lock = DirLock::acquire(dir)?;
    std::fs::write(dir.join("effective_config.toml"), cfg.to_effective_toml())?;

    let (pred, truth, classes) = match input {
        EvalInput::Files { predictions, labels } => {
            let pred = load_label_file(predictions)?;
            let truth = load_label_file(labels)?;
            // Square confusion matrix over every label either list mentions.
            let classes =
                pred.iter().chain(&truth).max().map_or(2, |&m| (m as usize + 1).max(2));
            (pred, truth, classes)
        }
        EvalInput::Model { model, manifest } => match cfg.precision {
            Precision::F32 => model_predictions::<f32>(model, manifest)?,
            Precision::F64 => model_predictions::<f64>(model, manifest)?,
        },
    };

    let metrics = evaluate(&pred, &truth, classes)?;
    write_metrics_csv(File::create(dir.join("metrics.csv"))?, &metrics)?;
    write_confusion_csv(File::create(dir.join("confusion.csv"))?, &metrics)?;
    log::info!(
        "{} samples, macro-P {:.4} macro-R {:.4} macro-F1 {:.4}",
        truth.len(),
        metrics.macro_precision,
        metrics.macro_recall,
        metrics.macro_f1
    );
    Ok(())
}

fn model_predictions<F: Scalar>(
    model_path: &Path,
    manifest: &Path,
) -> Result<(Vec<u32>, Vec<u32>, usize)> {
    let model = load_model::<F>(model_path)
        .with_context(|| format!("model {}", model_path.display()))?;
    let samples = load_labeled_flows(manifest)?;
    let truth: Vec<u32> = samples.iter().map(|s| s.label).collect();
    let pred = predict_labels(&model, &samples)?;
    Ok((pred, truth, model.head.classes()))
}
