//! `trage finetune`: train a flow classifier on top of a pre-trained
//! checkpoint and report metrics on the held-out test split.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use trage::classify::{
    evaluate, finetune, predict_labels, sample_and_split, save_model, write_confusion_csv,
    write_metrics_csv, EpochLog, MIN_FLOWS_PER_CLASS,
};
use trage::encoder::Scalar;
use trage::training::load_checkpoint;

use crate::config::RunConfig;
use crate::lock::DirLock;
use crate::manifest::load_labeled_flows;

pub fn run<F: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let manifest = cfg
        .dataset
        .manifest
        .clone()
        .context("no labeled flows: set [dataset] manifest or pass --manifest")?;
    let dir = &cfg.output_dir;
    let _lock = DirLock::acquire(dir)?;
    std::fs::write(dir.join("effective_config.toml"), cfg.to_effective_toml())?;

    let ckpt = load_checkpoint::<F>(checkpoint)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let samples = load_labeled_flows(&manifest)?;
    let total = samples.len();
    let split = sample_and_split(samples, cfg.dataset.class_cap, cfg.seed)?;
    for class in &split.dropped {
        log::warn!("class {class} has fewer than {MIN_FLOWS_PER_CLASS} flows; dropped");
    }
    log::info!(
        "{total} flows -> train {} / val {} / test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let out = finetune(&cfg.finetune.to_config(cfg.seed), &split.train, &split.val, &ckpt)?;
    let model_path = dir.join("model.trgc");
    save_model(&out.model, &model_path)?;
    write_epoch_log(File::create(dir.join("finetune_log.csv"))?, &out.log)?;

    let pred = predict_labels(&out.model, &split.test)?;
    let truth: Vec<u32> = split.test.iter().map(|s| s.label).collect();
    let metrics = evaluate(&pred, &truth, out.model.head.classes())?;
    write_metrics_csv(File::create(dir.join("metrics.csv"))?, &metrics)?;
    write_confusion_csv(File::create(dir.join("confusion.csv"))?, &metrics)?;
    log::info!(
        "fine-tuning done: best epoch {} (val macro-F1 {}), test macro-F1 {:.4}, model {}",
        out.best_epoch,
        out.best_val_macro_f1.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
        metrics.macro_f1,
        model_path.display()
    );
    Ok(())
}

/// CSV `epoch,train_loss,val_macro_f1`; a missing validation score is
/// written as `NaN`.
fn write_epoch_log<W: Write>(out: W, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_macro_f1"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_macro_f1.map_or_else(|| "NaN".to_string(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
