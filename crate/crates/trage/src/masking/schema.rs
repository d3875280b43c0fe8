//! Built-in protocol field tables and the field-length / geometric
//! comparison.
//!
//! Sub-byte fields are merged into the smallest byte-aligned composite:
//! IPv4 version+IHL become one 1-byte field, IPv4 flags+fragment-offset and
//! the TCP data-offset+reserved+flags block become one 2-byte field each,
//! and the IPv6 version+traffic-class+flow-label block becomes one 4-byte
//! field.

use std::collections::BTreeMap;

use super::GeometricSampler;

/// Byte lengths of the (composited) fields of one protocol header.
#[derive(Debug, Clone, Copy)]
pub struct FieldSchema {
    pub protocol: &'static str,
    pub fields: &'static [(&'static str, usize)],
}

pub const IPV4_SCHEMA: FieldSchema = FieldSchema {
    protocol: "ipv4",
    fields: &[
        ("version_ihl", 1),
        ("tos", 1),
        ("total_length", 2),
        ("identification", 2),
        ("flags_fragment_offset", 2),
        ("ttl", 1),
        ("protocol", 1),
        ("header_checksum", 2),
        ("src_addr", 4),
        ("dst_addr", 4),
    ],
};

pub const IPV6_SCHEMA: FieldSchema = FieldSchema {
    protocol: "ipv6",
    fields: &[
        ("version_tc_flowlabel", 4),
        ("payload_length", 2),
        ("next_header", 1),
        ("hop_limit", 1),
        ("src_addr", 16),
        ("dst_addr", 16),
    ],
};

pub const TCP_SCHEMA: FieldSchema = FieldSchema {
    protocol: "tcp",
    fields: &[
        ("src_port", 2),
        ("dst_port", 2),
        ("seq_num", 4),
        ("ack_num", 4),
        ("offset_reserved_flags", 2),
        ("window", 2),
        ("checksum", 2),
        ("urgent_ptr", 2),
    ],
};

pub const UDP_SCHEMA: FieldSchema = FieldSchema {
    protocol: "udp",
    fields: &[("src_port", 2), ("dst_port", 2), ("length", 2), ("checksum", 2)],
};

/// Histogram of field byte-lengths over the given schemas, as raw counts.
pub fn field_length_counts(schemas: &[FieldSchema]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for schema in schemas {
        for &(_, len) in schema.fields {
            *hist.entry(len).or_insert(0) += 1;
        }
    }
    hist
}

/// Normalize a count histogram to frequencies summing to one.
pub fn normalize_counts(counts: &BTreeMap<usize, usize>) -> BTreeMap<usize, f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(&len, &c)| (len, c as f64 / total.max(1) as f64))
        .collect()
}

/// Total-variation distance between a normalized length histogram and the
/// Geo(p) pmf truncated and renormalized at the maximum observed length.
pub fn compare_geometric(hist: &BTreeMap<usize, f64>, p: f64) -> f64 {
    let Some(&max_len) = hist.keys().max() else {
        return 0.0;
    };
    let geo = GeometricSampler::new(p);
    let mass: f64 = (1..=max_len).map(|k| geo.pmf(k)).sum();
    let mut tv = 0.0;
    for k in 1..=max_len {
        let emp = hist.get(&k).copied().unwrap_or(0.0);
        let pmf = geo.pmf(k) / mass;
        tv += (emp - pmf).abs();
    }
    0.5 * tv
}

/// Write a `length,count,empirical_freq,geometric_pmf` CSV for a
/// field-length histogram, using the truncated+renormalized Geo(p) pmf.
pub fn write_geo_comparison_csv<W: std::io::Write>(
    w: W,
    counts: &BTreeMap<usize, usize>,
    p: f64,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["length", "count", "empirical_freq", "geometric_pmf"])
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let freq = normalize_counts(counts);
    let max_len = counts.keys().max().copied().unwrap_or(1);
    let geo = GeometricSampler::new(p);
    let mass: f64 = (1..=max_len).map(|k| geo.pmf(k)).sum();
    for len in 1..=max_len {
        let count = counts.get(&len).copied().unwrap_or(0);
        let emp = freq.get(&len).copied().unwrap_or(0.0);
        let pmf = geo.pmf(len) / mass;
        w.write_record(&[len.to_string(), count.to_string(), emp.to_string(), pmf.to_string()])
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.flush()
}
