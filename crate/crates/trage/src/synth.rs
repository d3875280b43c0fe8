//! Synthetic labeled traffic for tests, benchmarks, and demos.
//!
//! Two fictional TCP application protocols whose class signal lives where
//! a model can see it after anonymization: header field values (ports,
//! TTL, IP flags, window, TCP options and thus header length) and payload
//! byte statistics (a low-entropy tag-value dialect vs. high-entropy
//! stream chunks). Addresses carry no class signal by construction since
//! ingest overwrites them anyway. Everything is a pure function of the
//! seed, so a dataset can be regenerated instead of stored.

use rand::Rng;

use crate::classify::FlowSample;
use crate::ingest::{
    assemble_flows, extract_records, parse_pcap, FlowKey, IngestError, PacketRecord, Timestamp,
};
use crate::masking::MaskSeed;

/// Number of classes [`two_protocol_dataset`] emits.
pub const SYNTH_CLASSES: u32 = 2;

// Seed streams, disjoint from the training/fine-tuning tags ("SYNTH" /
// "STRUC" in ASCII).
const FLOW_STREAM: u64 = 0x53_594E_5448;
const STRUCT_STREAM: u64 = 0x53_5452_5543;

/// A generated capture plus the label of each flow in first-seen order
/// (the order `assemble_flows` yields).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Classic little-endian microsecond capture, raw-IP link type.
    pub pcap: Vec<u8>,
    pub labels: Vec<u32>,
}

const LINKTYPE_RAW: u32 = 101;
const BASE_SECS: u64 = 1_700_000_000;

/// Gap between consecutive flow start times; packets within a flow arrive
/// faster than this, so nearby flows interleave on the wire.
const FLOW_SPACING_US: u64 = 2_500;
const PACKET_SPACING_US: u64 = 1_700;

/// Generate `flows_per_class` flows of each protocol, interleaved
/// class-alternating, as one capture. Byte-identical for equal inputs.
pub fn two_protocol_dataset(flows_per_class: usize, seed: u64) -> SynthDataset {
    let mut timed_frames: Vec<(u64, Vec<u8>)> = Vec::new();
    let mut labels = Vec::with_capacity(flows_per_class * SYNTH_CLASSES as usize);
    for g in 0..flows_per_class * SYNTH_CLASSES as usize {
        let label = (g % SYNTH_CLASSES as usize) as u32;
        labels.push(label);
        let mut rng = MaskSeed::new(seed, FLOW_STREAM, g as u64).rng();
        let start = g as u64 * FLOW_SPACING_US;
        timed_frames.extend(flow_frames(label, g as u32, start, &mut rng));
    }
    timed_frames.sort_by_key(|&(micros, _)| micros);

    let mut pcap = Vec::new();
    pcap.extend_from_slice(&[0xd4, 0xc3, 0xb2, 0xa1]); // magic, LE microseconds
    pcap.extend_from_slice(&2u16.to_le_bytes());
    pcap.extend_from_slice(&4u16.to_le_bytes());
    pcap.extend_from_slice(&0i32.to_le_bytes());
    pcap.extend_from_slice(&0u32.to_le_bytes());
    pcap.extend_from_slice(&65535u32.to_le_bytes());
    pcap.extend_from_slice(&LINKTYPE_RAW.to_le_bytes());
    for (micros, frame) in &timed_frames {
        pcap.extend_from_slice(&((BASE_SECS + micros / 1_000_000) as u32).to_le_bytes());
        pcap.extend_from_slice(&((micros % 1_000_000) as u32).to_le_bytes());
        pcap.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        pcap.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        pcap.extend_from_slice(frame);
    }
    SynthDataset { pcap, labels }
}

/// Parse a generated capture back into labeled flows.
pub fn labeled_flow_samples(ds: &SynthDataset) -> Result<Vec<FlowSample>, IngestError> {
    let raw = parse_pcap(&ds.pcap)?;
    let (records, stats) = extract_records(&raw);
    debug_assert_eq!(stats.malformed, 0, "generator emits only well-formed packets");
    let flows = assemble_flows(records);
    assert_eq!(
        flows.len(),
        ds.labels.len(),
        "every generated flow survives ingest exactly once"
    );
    Ok(flows
        .into_iter()
        .zip(&ds.labels)
        .map(|(mut flow, &label)| {
            flow.label = Some(label);
            FlowSample { flow, label }
        })
        .collect())
}

/// Per-class wire personalities. Class 0 is a chatty command channel:
/// server port 8443, TTL 64, DF set, modest window, no TCP options, and a
/// tag-length-value payload over a dozen-symbol alphabet (some pure ACKs
/// are empty). Class 1 is a bulk stream: server port 9091, TTL 52, DF
/// clear, maximal window, a 12-byte options block (so a 52-byte header),
/// and high-entropy payload chunks.
fn flow_frames(
    label: u32,
    flow_idx: u32,
    start_us: u64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(u64, Vec<u8>)> {
    let client = [10, label as u8 + 1, (flow_idx >> 8) as u8, flow_idx as u8];
    let (server, server_port, client_port, ttl, ip_flags, window): (
        [u8; 4],
        u16,
        u16,
        u8,
        u16,
        u16,
    ) = if label == 0 {
        (
            [192, 168, 0, 10],
            8443,
            49_152 + rng.gen_range(0..4_096),
            64,
            0x4000,
            8_192 + rng.gen_range(0..256),
        )
    } else {
        ([192, 168, 0, 20], 9091, 32_768 + rng.gen_range(0..16_384), 52, 0x0000, 65_535)
    };
    let mut seq_client: u32 = rng.gen();
    let mut seq_server: u32 = rng.gen();
    let mut ip_id: u16 = rng.gen();
    let mut tag_counter: u16 = rng.gen_range(0..1000);

    let n_packets = rng.gen_range(3..=8usize);
    (0..n_packets)
        .map(|k| {
            let client_sends = k == 0 || rng.gen_bool(0.7);
            let pure_ack = label == 0 && !client_sends && rng.gen_bool(0.5);
            let payload = if pure_ack {
                Vec::new()
            } else if label == 0 {
                tag_counter = tag_counter.wrapping_add(1);
                command_payload(tag_counter, rng)
            } else {
                stream_payload(rng)
            };

            let tcp_flags: u8 = if payload.is_empty() { 0x10 } else { 0x18 };
            let (seq, ack) = if client_sends {
                let out = (seq_client, seq_server);
                seq_client = seq_client.wrapping_add(payload.len() as u32);
                out
            } else {
                let out = (seq_server, seq_client);
                seq_server = seq_server.wrapping_add(payload.len() as u32);
                out
            };

            let mut tcp = Vec::with_capacity(32);
            let (sport, dport) =
                if client_sends { (client_port, server_port) } else { (server_port, client_port) };
            tcp.extend_from_slice(&sport.to_be_bytes());
            tcp.extend_from_slice(&dport.to_be_bytes());
            tcp.extend_from_slice(&seq.to_be_bytes());
            tcp.extend_from_slice(&ack.to_be_bytes());
            let data_offset_words: u8 = if label == 0 { 5 } else { 8 };
            tcp.push(data_offset_words << 4);
            tcp.push(tcp_flags);
            tcp.extend_from_slice(&window.to_be_bytes());
            tcp.extend_from_slice(&rng.gen::<u16>().to_be_bytes()); // checksum, not validated
            tcp.extend_from_slice(&[0, 0]); // urgent pointer
            if label == 1 {
                // NOP, NOP, timestamp option (kind 8, length 10).
                tcp.extend_from_slice(&[1, 1, 8, 10]);
                tcp.extend_from_slice(&rng.gen::<u32>().to_be_bytes());
                tcp.extend_from_slice(&rng.gen::<u32>().to_be_bytes());
            }
            debug_assert_eq!(tcp.len(), usize::from(data_offset_words) * 4);

            ip_id = ip_id.wrapping_add(1);
            let total_len = 20 + tcp.len() + payload.len();
            let mut frame = Vec::with_capacity(total_len);
            frame.push(0x45);
            frame.push(0x00);
            frame.extend_from_slice(&(total_len as u16).to_be_bytes());
            frame.extend_from_slice(&ip_id.to_be_bytes());
            frame.extend_from_slice(&ip_flags.to_be_bytes());
            frame.push(ttl);
            frame.push(6); // TCP
            frame.extend_from_slice(&rng.gen::<u16>().to_be_bytes()); // checksum
            let (src, dst) = if client_sends { (client, server) } else { (server, client) };
            frame.extend_from_slice(&src);
            frame.extend_from_slice(&dst);
            frame.extend_from_slice(&tcp);
            frame.extend_from_slice(&payload);

            let micros = start_us + k as u64 * PACKET_SPACING_US + rng.gen_range(0..500);
            (micros, frame)
        })
        .collect()
}

/// Class-0 payload: `C7 01` magic, a four-digit ASCII tag counter, then a
/// body over a small alphabet — low byte entropy, strong positional
/// structure.
fn command_payload(tag_counter: u16, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<u8> {
    const ALPHABET: &[u8] =
        &[0x00, 0x01, 0x02, 0x03, 0x20, 0x30, 0x31, 0x32, 0x33, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39];
    let body_len = rng.gen_range(8..=42usize);
    let mut p = Vec::with_capacity(6 + body_len);
    p.extend_from_slice(&[0xC7, 0x01]);
    p.extend_from_slice(format!("{:04}", tag_counter % 10_000).as_bytes());
    p.extend((0..body_len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]));
    p
}

/// Class-1 payload: `55 AA` magic then a uniform-random chunk.
fn stream_payload(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<u8> {
    let body_len = rng.gen_range(20..=58usize);
    let mut p = Vec::with_capacity(2 + body_len);
    p.extend_from_slice(&[0x55, 0xAA]);
    p.extend((0..body_len).map(|_| rng.gen::<u8>()));
    p
}

/// A corpus of header-shaped byte strings for masked-prediction training
/// oracles: 40 bytes of fixed-position fields — constants, a sequence
/// counter, and a few narrow random fields. Every even-offset byte stays
/// below 16, so all token ids fall below 5 + 16·256 = 4101 and a small
/// output vocabulary suffices. Payloads are empty (header stream only).
pub fn structured_header_corpus(n: usize, seed: u64) -> Vec<PacketRecord> {
    (0..n)
        .map(|i| {
            let mut rng = MaskSeed::new(seed, STRUCT_STREAM, i as u64).rng();
            let mut bytes = Vec::with_capacity(40);
            for pair in 0..20usize {
                let (hi, lo): (u8, u8) = match pair {
                    0 => (0x04, 0x28),
                    1 => (0x00, 0x06),
                    // Sequence counter, the field a model can only tie to
                    // its neighbors, never memorize globally.
                    2 => (((i >> 8) & 0x0f) as u8, (i & 0xff) as u8),
                    3 => (0x0f, rng.gen()),
                    4 | 5 => (0x0a, 0x01 + rng.gen_range(0..3u8)),
                    6 | 7 => (0x0b, 0x10 + rng.gen_range(0..8u8)),
                    8 => (0x01, 0xbb),
                    9 => (rng.gen_range(0..8u8), rng.gen()),
                    10..=13 => (0x00, 0x00),
                    14 => (0x05, 0x00),
                    15 => (0x0c, rng.gen_range(0..64u8)),
                    16..=18 => (0x02, 0x22),
                    _ => ((i % 7) as u8, 0x99),
                };
                debug_assert!(hi < 16);
                bytes.push(hi);
                bytes.push(lo);
            }
            let (flow_key, direction) = FlowKey::canonical(
                std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 0, 1)),
                1000 + i as u16,
                std::net::IpAddr::V4(std::net::Ipv4Addr::new(10, 0, 0, 2)),
                7,
                6,
            );
            PacketRecord {
                flow_key,
                direction,
                header_bytes: bytes,
                payload_bytes: Vec::new(),
                capture_ts: Timestamp::new(i as u64, 0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::tokenize_bytes;
    use std::collections::HashSet;

    #[test]
    fn dataset_roundtrips_through_ingest_with_aligned_labels() {
        let ds = two_protocol_dataset(12, 7);
        let samples = labeled_flow_samples(&ds).unwrap();
        assert_eq!(samples.len(), 24);
        assert_eq!(samples.iter().filter(|s| s.label == 0).count(), 12);
        assert_eq!(samples.iter().filter(|s| s.label == 1).count(), 12);
        // Generation order alternates classes, and so does first-seen order.
        let first: Vec<u32> = samples.iter().take(4).map(|s| s.label).collect();
        assert_eq!(first, vec![0, 1, 0, 1]);
        for s in &samples {
            assert!((3..=8).contains(&s.flow.packets.len()));
            assert_eq!(s.flow.label, Some(s.label));
        }
    }

    #[test]
    fn no_packet_is_skipped_or_malformed() {
        let ds = two_protocol_dataset(10, 3);
        let raw = parse_pcap(&ds.pcap).unwrap();
        let (records, stats) = extract_records(&raw);
        assert_eq!(stats.malformed, 0);
        assert_eq!(stats.total_skipped(), 0);
        assert_eq!(records.len(), raw.len());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        assert_eq!(two_protocol_dataset(5, 9), two_protocol_dataset(5, 9));
        assert_ne!(two_protocol_dataset(5, 9).pcap, two_protocol_dataset(5, 10).pcap);
    }

    #[test]
    fn class_signal_lives_in_header_fields_not_addresses() {
        let ds = two_protocol_dataset(8, 11);
        let samples = labeled_flow_samples(&ds).unwrap();
        for s in &samples {
            for rec in &s.flow.packets {
                let h = &rec.header_bytes;
                // Addresses are anonymized identically for both classes.
                let anon = [&h[12..16], &h[16..20]];
                assert!(anon.contains(&&[0u8, 0, 0, 0][..]));
                assert!(anon.contains(&&[0u8, 0, 0, 1][..]));
                if s.label == 0 {
                    assert_eq!(h.len(), 40);
                    assert_eq!(h[8], 64); // TTL
                    assert_eq!(&h[6..8], &[0x40, 0x00]); // DF
                } else {
                    assert_eq!(h.len(), 52);
                    assert_eq!(h[8], 52);
                    assert_eq!(&h[6..8], &[0x00, 0x00]);
                    assert_eq!(&h[40..44], &[1, 1, 8, 10]); // options block
                    // Maximal advertised window.
                    assert_eq!(&h[34..36], &[0xff, 0xff]);
                }
            }
        }
    }

    #[test]
    fn payload_statistics_differ_by_class() {
        let ds = two_protocol_dataset(15, 13);
        let samples = labeled_flow_samples(&ds).unwrap();
        let distinct_ratio = |label: u32| {
            let mut seen = HashSet::new();
            let mut total = 0usize;
            for s in samples.iter().filter(|s| s.label == label) {
                for rec in &s.flow.packets {
                    if rec.payload_bytes.is_empty() {
                        assert_eq!(label, 0, "only the command class sends pure ACKs");
                        continue;
                    }
                    let magic = if label == 0 { [0xC7, 0x01] } else { [0x55, 0xAA] };
                    assert_eq!(&rec.payload_bytes[..2], &magic);
                    seen.extend(rec.payload_bytes.iter().copied());
                    total += rec.payload_bytes.len();
                }
            }
            assert!(total > 200, "enough payload bytes to compare");
            seen.len()
        };
        let low = distinct_ratio(0);
        let high = distinct_ratio(1);
        assert!(low <= 20, "command alphabet is small, saw {low} distinct bytes");
        assert!(high > 200, "stream chunks cover most byte values, saw {high}");
    }

    #[test]
    fn payloads_fit_a_32_token_budget() {
        let ds = two_protocol_dataset(10, 17);
        for s in labeled_flow_samples(&ds).unwrap() {
            for rec in &s.flow.packets {
                assert!(rec.payload_bytes.len() <= 62);
                assert!(rec.header_bytes.len() <= 52);
            }
        }
    }

    #[test]
    fn structured_corpus_is_small_vocab_and_structured() {
        let corpus = structured_header_corpus(50, 21);
        assert_eq!(corpus.len(), 50);
        for rec in &corpus {
            assert_eq!(rec.header_bytes.len(), 40);
            assert!(rec.payload_bytes.is_empty());
            let seq = tokenize_bytes(&rec.header_bytes, 32);
            for &id in &seq.ids[..seq.real_len] {
                assert!(id < 4101, "token {id} exceeds the reduced vocabulary");
            }
        }
        // Constant fields are constant; the counter field varies.
        let constant_pair = |j: usize| {
            corpus
                .iter()
                .map(|r| (r.header_bytes[2 * j], r.header_bytes[2 * j + 1]))
                .collect::<HashSet<_>>()
                .len()
        };
        assert_eq!(constant_pair(0), 1);
        assert_eq!(constant_pair(8), 1);
        assert_eq!(constant_pair(2), 50); // sequence counter distinct per record
        assert!(constant_pair(9) > 10); // random field varies
        assert_eq!(structured_header_corpus(50, 21), structured_header_corpus(50, 21));
    }
}
