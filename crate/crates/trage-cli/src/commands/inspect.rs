//! `trage inspect`: human-readable dumps. Artifacts are described from
//! their metadata alone (no tensor decoding, so any precision opens);
//! captures are parsed and their first records printed.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value;

use trage::ingest::{assemble_flows, extract_records, parse_pcap, Direction, PacketRecord};

use crate::envelope;

pub fn artifact(path: &Path) -> Result<()> {
    let env = envelope::peek(path)?;
    let meta = &env.metadata;
    match &env.magic {
        b"TRGE" => {
            println!("{}: pre-training checkpoint (TRGE v{})", path.display(), env.version);
            println!("  step {} | base seed {}", field(meta, "step"), field(meta, "base_seed"));
            let moments = match meta.get("adam_t") {
                Some(Value::Array(t)) if t.len() == 2 => {
                    format!("present (t_h {}, t_p {})", t[0], t[1])
                }
                _ => "absent".to_string(),
            };
            println!("  optimizer moments: {moments}");
        }
        b"TRGC" => {
            println!("{}: fine-tuned classifier (TRGC v{})", path.display(), env.version);
            println!(
                "  classes {} | head hidden {} | packets per flow {}",
                field(meta, "classes"),
                field(meta, "head_hidden"),
                field(meta, "n_max_packets")
            );
        }
        _ => unreachable!("peek admits only known magics"),
    }
    println!("  header encoder:  {}", encoder_line(meta.get("header_config")));
    println!("  payload encoder: {}", encoder_line(meta.get("payload_config")));
    if let Some(Value::Array(tensors)) = meta.get("tensors") {
        let params: u64 = tensors
            .iter()
            .map(|t| {
                t.get("shape")
                    .and_then(Value::as_array)
                    .map_or(0, |s| s.iter().filter_map(Value::as_u64).product())
            })
            .sum();
        println!(
            "  {} tensors | {params} parameters | {} payload bytes",
            tensors.len(),
            env.payload_len
        );
    }
    Ok(())
}

fn field(meta: &Value, name: &str) -> String {
    meta.get(name).map_or_else(|| "?".to_string(), Value::to_string)
}

fn encoder_line(cfg: Option<&Value>) -> String {
    let Some(cfg) = cfg else {
        return "?".to_string();
    };
    let get = |k: &str| field(cfg, k);
    format!(
        "vocab {} | max_len {} | hidden {} | layers {} | heads {} | dropout {} | {}",
        get("vocab_size"),
        get("max_len"),
        get("hidden"),
        get("layers"),
        get("heads"),
        get("dropout"),
        cfg.get("precision").and_then(Value::as_str).unwrap_or("?"),
    )
}

pub fn capture(path: &Path, k: usize) -> Result<()> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read capture {}", path.display()))?;
    let packets = parse_pcap(&bytes).with_context(|| format!("capture {}", path.display()))?;
    let (records, stats) = extract_records(&packets);
    let n_flows = assemble_flows(records.clone()).len();
    println!(
        "{}: {} packets | {} records | {} skipped | {} malformed | {} flows",
        path.display(),
        packets.len(),
        records.len(),
        stats.total_skipped(),
        stats.malformed,
        n_flows
    );
    for (i, rec) in records.iter().take(k).enumerate() {
        print_record(i, rec);
    }
    if records.len() > k {
        println!("… {} more records", records.len() - k);
    }
    Ok(())
}

fn print_record(i: usize, rec: &PacketRecord) {
    let key = &rec.flow_key;
    let proto = match key.proto {
        6 => "tcp".to_string(),
        17 => "udp".to_string(),
        p => format!("proto-{p}"),
    };
    let dir = match rec.direction {
        Direction::AToB => "a->b",
        Direction::BToA => "b->a",
    };
    println!(
        "record {i} @{}.{:06} {proto} {}:{} <-> {}:{} ({dir}) header {} B payload {} B",
        rec.capture_ts.secs,
        rec.capture_ts.nanos / 1_000,
        key.addr_a,
        key.port_a,
        key.addr_b,
        key.port_b,
        rec.header_bytes.len(),
        rec.payload_bytes.len()
    );
    println!("  header:  {}", hex_preview(&rec.header_bytes));
    println!("  payload: {}", hex_preview(&rec.payload_bytes));
}

fn hex_preview(bytes: &[u8]) -> String {
    if bytes.is_empty() {
        return "(empty)".to_string();
    }
    let shown = &bytes[..bytes.len().min(32)];
    let mut out = String::with_capacity(shown.len() * 3);
    for (i, b) in shown.iter().enumerate() {
        if i > 0 && i % 2 == 0 {
            out.push(' ');
        }
        out.push_str(&format!("{b:02x}"));
    }
    if bytes.len() > 32 {
        out.push('…');
    }
    out
}
