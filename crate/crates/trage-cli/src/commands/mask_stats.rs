//! `trage mask-stats`: how well protocol field lengths and field-level
//! masking runs match the geometric span-length distribution.
//!
//! Writes two plot-ready CSVs: `field_lengths.csv` (byte lengths of the
//! IPv4+TCP schema fields vs the Geo(p) pmf) and `run_lengths.csv`
//! (maximal masked-run lengths over sampled mask plans vs Geo(p)).

use std::fs::File;

use anyhow::{bail, Result};

use trage::masking::{
    compare_geometric, field_length_counts, normalize_counts, run_length_histogram,
    write_geo_comparison_csv, write_run_length_csv, GeometricSampler, IPV4_SCHEMA, TCP_SCHEMA,
};

use crate::config::RunConfig;
use crate::lock::DirLock;

pub fn run(cfg: &RunConfig, plans: usize, sequence_len: usize) -> Result<()> {
    if plans == 0 {
        bail!("--plans must be at least 1");
    }
    if sequence_len < 2 {
        bail!("--sequence-len must be at least 2 (CLS plus one maskable token)");
    }
    let dir = &cfg.output_dir;
    let _lock = DirLock::acquire(dir)?;
    std::fs::write(dir.join("effective_config.toml"), cfg.to_effective_toml())?;

    let p = cfg.pretrain.geometric_p;
    let ratio = cfg.pretrain.mask_ratio;

    let counts = field_length_counts(&[IPV4_SCHEMA, TCP_SCHEMA]);
    write_geo_comparison_csv(File::create(dir.join("field_lengths.csv"))?, &counts, p)?;
    let tv = compare_geometric(&normalize_counts(&counts), p);

    let hist = run_length_histogram(sequence_len, &GeometricSampler::new(p), ratio, cfg.seed, plans);
    write_run_length_csv(File::create(dir.join("run_lengths.csv"))?, &hist, p)?;

    log::info!(
        "field lengths {:?} (TV distance to Geo({p}) {tv:.4}); {} masked runs over {plans} plans",
        counts,
        hist.values().sum::<usize>()
    );
    Ok(())
}
