//! `trage pretrain`: masked-language-model pre-training over captures.

use std::fs::File;

use anyhow::{bail, Context, Result};

use trage::encoder::Scalar;
use trage::ingest::{extract_records, parse_pcap, PacketRecord};
use trage::training::{run_pretrain, save_checkpoint, write_training_log_csv};

use crate::config::RunConfig;
use crate::lock::DirLock;

pub fn run<F: Scalar>(cfg: &RunConfig) -> Result<()> {
    if cfg.dataset.pcaps.is_empty() {
        bail!("no captures to pre-train on: set [dataset] pcaps or pass --pcap");
    }
    let dir = &cfg.output_dir;
    let _lock = DirLock::acquire(dir)?;
    std::fs::write(dir.join("effective_config.toml"), cfg.to_effective_toml())?;

    let mut corpus: Vec<PacketRecord> = Vec::new();
    for path in &cfg.dataset.pcaps {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read capture {}", path.display()))?;
        let packets =
            parse_pcap(&bytes).with_context(|| format!("capture {}", path.display()))?;
        let (records, stats) = extract_records(&packets);
        stats.log_summary(&path.display().to_string());
        corpus.extend(records);
    }

    let hdr = cfg.header_encoder.to_encoder_config(cfg.precision);
    let pay = cfg.payload_encoder.to_encoder_config(cfg.precision);
    let out = run_pretrain::<F>(&cfg.pretrain.to_config(cfg.seed), &hdr, &pay, corpus)?;

    let ckpt_path = dir.join("checkpoint.trge");
    save_checkpoint(&out.checkpoint, &ckpt_path)?;
    write_training_log_csv(File::create(dir.join("pretrain_log.csv"))?, &out.log)?;
    let last = out.log.last().expect("at least one step");
    log::info!(
        "pre-training done: {} steps, final loss_fm {:.4}, checkpoint {}",
        out.log.len(),
        last.loss_fm,
        ckpt_path.display()
    );
    Ok(())
}
