//! Classic (libpcap) capture file parsing. Microsecond and nanosecond
//! magics are accepted in either byte order; pcapng is out of scope.

use super::{IngestError, RawPacket, Timestamp};

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// Magic read big-endian from the first four file bytes. The byte-swapped
/// variants indicate every subsequent field is little-endian.
const MAGIC_US_BE: u32 = 0xa1b2_c3d4;
const MAGIC_US_LE: u32 = 0xd4c3_b2a1;
const MAGIC_NS_BE: u32 = 0xa1b2_3c4d;
const MAGIC_NS_LE: u32 = 0x4d3c_b2a1;

#[derive(Clone, Copy)]
struct Layout {
    little_endian: bool,
    nanosecond: bool,
}

fn read_u32(bytes: &[u8], offset: usize, little_endian: bool) -> u32 {
    let raw: [u8; 4] = bytes[offset..offset + 4].try_into().expect("bounds checked");
    if little_endian {
        u32::from_le_bytes(raw)
    } else {
        u32::from_be_bytes(raw)
    }
}

/// Parse an in-memory classic capture into raw packets.
///
/// A record truncated by an interrupted capture (declared length runs a
/// short distance past end-of-stream) is dropped silently; a declared
/// length exceeding the remaining bytes by more than one maximal record is
/// treated as a corrupt record header since lengths that large cannot come
/// from slicing a valid stream.
pub fn parse_pcap(bytes: &[u8]) -> Result<Vec<RawPacket>, IngestError> {
    if bytes.len() < 4 {
        return Err(IngestError::UnknownMagic(0));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("len checked"));
    let layout = match magic {
        MAGIC_US_BE => Layout { little_endian: false, nanosecond: false },
        MAGIC_US_LE => Layout { little_endian: true, nanosecond: false },
        MAGIC_NS_BE => Layout { little_endian: false, nanosecond: true },
        MAGIC_NS_LE => Layout { little_endian: true, nanosecond: true },
        other => return Err(IngestError::UnknownMagic(other)),
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(IngestError::CorruptHeader(format!(
            "global header truncated to {} bytes",
            bytes.len()
        )));
    }
    let snaplen = read_u32(bytes, 16, layout.little_endian);
    let link_type = read_u32(bytes, 20, layout.little_endian);
    // Ceiling on how far a declared capture length may overshoot the bytes
    // actually present before we call the header corrupt rather than the
    // stream merely cut off.
    let max_overshoot = RECORD_HEADER_LEN as u64 + u64::from(snaplen.max(65_535));

    let mut packets = Vec::new();
    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        let remaining = bytes.len() - offset;
        if remaining < RECORD_HEADER_LEN {
            log::debug!("dropping {remaining} trailing bytes (partial record header)");
            break;
        }
        let ts_sec = read_u32(bytes, offset, layout.little_endian);
        let ts_subsec = read_u32(bytes, offset + 4, layout.little_endian);
        let incl_len = read_u32(bytes, offset + 8, layout.little_endian) as usize;
        let orig_len = read_u32(bytes, offset + 12, layout.little_endian);
        let data_start = offset + RECORD_HEADER_LEN;
        let available = bytes.len() - data_start;
        if incl_len > available {
            if incl_len as u64 > available as u64 + max_overshoot {
                return Err(IngestError::CorruptHeader(format!(
                    "record at offset {offset} declares {incl_len} captured bytes \
                     with only {available} remaining"
                )));
            }
            log::debug!("dropping truncated final record at offset {offset}");
            break;
        }
        let nanos = if layout.nanosecond {
            u64::from(ts_subsec)
        } else {
            u64::from(ts_subsec) * 1_000
        };
        packets.push(RawPacket {
            capture_ts: Timestamp::new(u64::from(ts_sec), nanos),
            link_type,
            data: bytes[data_start..data_start + incl_len].to_vec(),
            // A record claiming more captured than original bytes is
            // tolerated by clamping so the invariant data ≤ orig_len holds.
            orig_len: orig_len.max(incl_len as u32),
        });
        offset = data_start + incl_len;
    }
    Ok(packets)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled little-endian microsecond capture with `records`
    /// packet bodies appended verbatim.
    pub(crate) fn build_pcap_le(records: &[(u32, u32, &[u8])]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&[0xd4, 0xc3, 0xb2, 0xa1]); // magic, LE us
        out.extend_from_slice(&2u16.to_le_bytes()); // version major
        out.extend_from_slice(&4u16.to_le_bytes()); // version minor
        out.extend_from_slice(&0i32.to_le_bytes()); // thiszone
        out.extend_from_slice(&0u32.to_le_bytes()); // sigfigs
        out.extend_from_slice(&65535u32.to_le_bytes()); // snaplen
        out.extend_from_slice(&1u32.to_le_bytes()); // link type: Ethernet
        for (sec, usec, data) in records {
            out.extend_from_slice(&sec.to_le_bytes());
            out.extend_from_slice(&usec.to_le_bytes());
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            out.extend_from_slice(data);
        }
        out
    }

    #[test]
    fn little_endian_magic_byte_swaps_fields() {
        let body = vec![0xabu8; 60];
        let file = build_pcap_le(&[(1_700_000_000, 250_000, &body)]);
        let packets = parse_pcap(&file).unwrap();
        assert_eq!(packets.len(), 1);
        assert_eq!(packets[0].capture_ts.secs, 1_700_000_000);
        assert_eq!(packets[0].capture_ts.nanos, 250_000_000);
        assert_eq!(packets[0].data.len(), 60);
        assert_eq!(packets[0].orig_len, 60);
        assert_eq!(packets[0].link_type, 1);
    }

    #[test]
    fn big_endian_microsecond_file() {
        let mut out = Vec::new();
        out.extend_from_slice(&[0xa1, 0xb2, 0xc3, 0xd4]);
        out.extend_from_slice(&2u16.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&0i32.to_be_bytes());
        out.extend_from_slice(&0u32.to_be_bytes());
        out.extend_from_slice(&65535u32.to_be_bytes());
        out.extend_from_slice(&101u32.to_be_bytes());
        out.extend_from_slice(&7u32.to_be_bytes());
        out.extend_from_slice(&5u32.to_be_bytes());
        out.extend_from_slice(&3u32.to_be_bytes());
        out.extend_from_slice(&3u32.to_be_bytes());
        out.extend_from_slice(&[1, 2, 3]);
        let packets = parse_pcap(&out).unwrap();
        assert_eq!(packets[0].capture_ts, Timestamp::new(7, 5_000));
        assert_eq!(packets[0].link_type, 101);
        assert_eq!(packets[0].data, vec![1, 2, 3]);
    }

    #[test]
    fn nanosecond_magic_keeps_subsecond_exact() {
        let mut file = build_pcap_le(&[(9, 123_456_789, &[0u8; 4])]);
        file[..4].copy_from_slice(&[0x4d, 0x3c, 0xb2, 0xa1]); // LE ns magic
        let packets = parse_pcap(&file).unwrap();
        assert_eq!(packets[0].capture_ts, Timestamp { secs: 9, nanos: 123_456_789 });
    }

    #[test]
    fn unknown_magic_rejected() {
        let err = parse_pcap(&[0xde, 0xad, 0xbe, 0xef, 0, 0]).unwrap_err();
        assert_eq!(err, IngestError::UnknownMagic(0xdeadbeef));
    }

    #[test]
    fn short_file_rejected() {
        assert!(matches!(parse_pcap(&[0xd4]), Err(IngestError::UnknownMagic(_))));
        let err = parse_pcap(&[0xd4, 0xc3, 0xb2, 0xa1, 0x00]).unwrap_err();
        assert!(matches!(err, IngestError::CorruptHeader(_)));
    }

    #[test]
    fn truncated_final_record_dropped_silently() {
        let full = build_pcap_le(&[(1, 0, &[9u8; 40]), (2, 0, &[8u8; 40])]);
        // cut the second record's body in half
        let cut = &full[..full.len() - 20];
        let packets = parse_pcap(cut).unwrap();
        assert_eq!(packets.len(), 1);
        assert_eq!(packets[0].capture_ts.secs, 1);
    }

    #[test]
    fn absurd_declared_length_is_corrupt() {
        let mut file = build_pcap_le(&[(1, 0, &[0u8; 8])]);
        let incl_off = GLOBAL_HEADER_LEN + 8;
        file[incl_off..incl_off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = parse_pcap(&file).unwrap_err();
        assert!(matches!(err, IngestError::CorruptHeader(_)));
    }

    #[test]
    fn empty_capture_yields_no_packets() {
        let file = build_pcap_le(&[]);
        assert!(parse_pcap(&file).unwrap().is_empty());
    }

    #[test]
    fn incl_longer_than_orig_clamps_orig() {
        let mut file = build_pcap_le(&[(1, 0, &[5u8; 10])]);
        let orig_off = GLOBAL_HEADER_LEN + 12;
        file[orig_off..orig_off + 4].copy_from_slice(&4u32.to_le_bytes());
        let packets = parse_pcap(&file).unwrap();
        assert_eq!(packets[0].orig_len, 10);
    }
}
