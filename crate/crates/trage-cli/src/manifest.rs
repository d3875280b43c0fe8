//! Labeled-flow manifests and plain label files.
//!
//! A manifest is a CSV with header `pcap,flow,label`: a capture path
//! (relative paths resolve against the manifest's own directory), the
//! flow's index in that capture's first-seen flow order, and an integer
//! class label. Keeping labels out of band lets one capture serve many
//! labelings.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use trage::classify::FlowSample;
use trage::ingest::{assemble_flows, extract_records, parse_pcap, Flow};

#[derive(Debug, Deserialize)]
struct ManifestRow {
    pcap: String,
    flow: usize,
    label: u32,
}

/// Parse every capture a manifest references (each once) and return the
/// labeled flows in manifest row order.
pub fn load_labeled_flows(manifest_path: &Path) -> Result<Vec<FlowSample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest_path)
        .with_context(|| format!("cannot open manifest {}", manifest_path.display()))?;

    let mut cache: HashMap<PathBuf, Vec<Flow>> = HashMap::new();
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.with_context(|| {
            format!("manifest {} row {}", manifest_path.display(), i + 2)
        })?;
        let path = if Path::new(&row.pcap).is_absolute() {
            PathBuf::from(&row.pcap)
        } else {
            base.join(&row.pcap)
        };
        if !cache.contains_key(&path) {
            cache.insert(path.clone(), flows_of(&path)?);
        }
        let flows = &cache[&path];
        let Some(flow) = flows.get(row.flow) else {
            bail!(
                "manifest {} row {}: {} has {} flows but index {} was requested",
                manifest_path.display(),
                i + 2,
                path.display(),
                flows.len(),
                row.flow
            );
        };
        samples.push(FlowSample { flow: flow.clone(), label: row.label });
    }
    if samples.is_empty() {
        bail!("manifest {} lists no flows", manifest_path.display());
    }
    Ok(samples)
}

fn flows_of(path: &Path) -> Result<Vec<Flow>> {
    let bytes =
        fs::read(path).with_context(|| format!("cannot read capture {}", path.display()))?;
    let packets =
        parse_pcap(&bytes).with_context(|| format!("capture {}", path.display()))?;
    let (records, stats) = extract_records(&packets);
    if stats.total_skipped() > 0 {
        log::info!(
            "{}: {} packets skipped (non-IP or unsupported transport), {} malformed",
            path.display(),
            stats.total_skipped(),
            stats.malformed
        );
    }
    Ok(assemble_flows(records))
}

/// Read one unsigned integer label per line; blank lines are ignored.
pub fn load_label_file(path: &Path) -> Result<Vec<u32>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<u32>().with_context(|| {
            format!("{} line {}: {line:?} is not an unsigned integer label", path.display(), i + 1)
        })?);
    }
    Ok(labels)
}
