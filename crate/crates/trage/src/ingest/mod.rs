//! Packet ingestion: classic PCAP parsing, header/payload splitting, and
//! bidirectional flow assembly.
//!
//! The header boundary is protocol-schema-driven: `header_bytes` is the
//! IP header (with options) plus the TCP/UDP header, starting at the IP
//! version nibble with the link layer stripped; `payload_bytes` is
//! everything after the transport header within the IP packet. Source and
//! destination addresses inside `header_bytes` are overwritten with fixed
//! constants so models never see real addresses; flow keys keep the
//! originals so conversations still group correctly.

mod packet;
mod pcap;

pub use packet::{extract_packet_record, Extraction, SkipReason};
pub use pcap::parse_pcap;

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::net::IpAddr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("unknown capture magic {0:#010x}")]
    UnknownMagic(u32),
    #[error("corrupt capture header: {0}")]
    CorruptHeader(String),
    #[error("malformed IP header: {0}")]
    MalformedIP(String),
    #[error("malformed transport header: {0}")]
    MalformedTransport(String),
}

/// Capture timestamp, seconds and sub-second nanoseconds since the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Timestamp {
    pub secs: u64,
    pub nanos: u32,
}

impl Timestamp {
    /// Normalizing constructor; carries nanosecond overflow into seconds.
    pub fn new(secs: u64, nanos: u64) -> Self {
        Self {
            secs: secs + nanos / 1_000_000_000,
            nanos: (nanos % 1_000_000_000) as u32,
        }
    }
}

/// One captured packet, still carrying its link-layer bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub capture_ts: Timestamp,
    pub link_type: u32,
    pub data: Vec<u8>,
    pub orig_len: u32,
}

/// Canonical bidirectional 5-tuple: endpoint A is the lexicographically
/// smaller `(address bytes, port)` pair, so both directions of a
/// conversation map to the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub addr_a: IpAddr,
    pub addr_b: IpAddr,
    pub port_a: u16,
    pub port_b: u16,
    pub proto: u8,
}

fn endpoint_bytes(addr: &IpAddr) -> [u8; 16] {
    match addr {
        IpAddr::V4(v4) => {
            let mut b = [0u8; 16];
            b[..4].copy_from_slice(&v4.octets());
            b
        }
        IpAddr::V6(v6) => v6.octets(),
    }
}

impl FlowKey {
    /// Build the canonical key from a packet's source/destination endpoint
    /// and report whether the source side is endpoint A.
    pub fn canonical(
        src: IpAddr,
        src_port: u16,
        dst: IpAddr,
        dst_port: u16,
        proto: u8,
    ) -> (Self, Direction) {
        let src_key = (endpoint_bytes(&src), src_port);
        let dst_key = (endpoint_bytes(&dst), dst_port);
        if src_key <= dst_key {
            (
                Self { addr_a: src, addr_b: dst, port_a: src_port, port_b: dst_port, proto },
                Direction::AToB,
            )
        } else {
            (
                Self { addr_a: dst, addr_b: src, port_a: dst_port, port_b: src_port, proto },
                Direction::BToA,
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AToB,
    BToA,
}

/// One parsed packet: anonymized header and payload bytes plus flow
/// identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub flow_key: FlowKey,
    pub direction: Direction,
    pub header_bytes: Vec<u8>,
    pub payload_bytes: Vec<u8>,
    pub capture_ts: Timestamp,
}

/// All packets sharing one canonical 5-tuple, ordered by capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub key: FlowKey,
    pub packets: Vec<PacketRecord>,
    pub label: Option<u32>,
}

/// Skip and error tallies from a batch extraction, the diagnostics channel
/// for ingest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub records: usize,
    pub skipped: HashMap<SkipReason, usize>,
    pub malformed: usize,
}

impl IngestStats {
    pub fn total_skipped(&self) -> usize {
        self.skipped.values().sum()
    }

    pub fn log_summary(&self, source: &str) {
        log::info!(
            "{source}: {} records, {} skipped, {} malformed",
            self.records,
            self.total_skipped(),
            self.malformed
        );
        for (reason, count) in &self.skipped {
            log::debug!("{source}: skipped {count} ({reason:?})");
        }
    }
}

/// Group records by canonical flow key. Flows are emitted in order of
/// their first packet; within a flow, records are stably sorted by capture
/// timestamp.
pub fn assemble_flows(records: Vec<PacketRecord>) -> Vec<Flow> {
    let mut order: Vec<FlowKey> = Vec::new();
    let mut groups: HashMap<FlowKey, Vec<PacketRecord>> = HashMap::new();
    for rec in records {
        let entry = groups.entry(rec.flow_key).or_insert_with(|| {
            order.push(rec.flow_key);
            Vec::new()
        });
        entry.push(rec);
    }
    order
        .into_iter()
        .map(|key| {
            let mut packets = groups.remove(&key).expect("group exists");
            packets.sort_by_key(|p| p.capture_ts);
            Flow { key, packets, label: None }
        })
        .collect()
}

/// Extract records from a slice of raw packets, tallying skips and
/// malformed packets instead of failing the batch.
pub fn extract_records(packets: &[RawPacket]) -> (Vec<PacketRecord>, IngestStats) {
    let mut records = Vec::new();
    let mut stats = IngestStats::default();
    for pkt in packets {
        match extract_packet_record(pkt) {
            Ok(Extraction::Record(rec)) => {
                stats.records += 1;
                records.push(*rec);
            }
            Ok(Extraction::Skip(reason)) => {
                *stats.skipped.entry(reason).or_insert(0) += 1;
            }
            Err(err) => {
                log::debug!("malformed packet: {err}");
                stats.malformed += 1;
            }
        }
    }
    (records, stats)
}
