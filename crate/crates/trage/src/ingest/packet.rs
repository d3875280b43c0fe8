//! Link/network/transport decoding of a single captured packet into an
//! anonymized header/payload record.

use super::{FlowKey, IngestError, PacketRecord, RawPacket};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_IPV4: u32 = 228;
const LINKTYPE_IPV6: u32 = 229;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;

/// IPv6 next-header values that introduce extension headers we do not walk.
const IPV6_EXTENSION_HEADERS: [u8; 9] = [0, 43, 44, 50, 51, 60, 135, 139, 140];

/// Why a structurally valid capture record produced no model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipReason {
    /// Link layer we do not decode (only Ethernet and raw IP are handled).
    UnsupportedLinkType,
    /// Ethernet frame carrying something other than IPv4/IPv6.
    NonIp,
    /// IPv4 fragment; reassembly is out of scope.
    Fragmented,
    /// IP packet whose next protocol is not TCP or UDP.
    NonTcpUdp,
    /// IPv6 packet with extension headers between IP and transport.
    Ipv6Extension,
    /// Capture cut the packet short of its declared length (snaplen).
    Truncated,
}

/// Outcome of decoding one packet: a usable record or a skip.
#[derive(Debug, Clone, PartialEq)]
pub enum Extraction {
    Record(Box<PacketRecord>),
    Skip(SkipReason),
}

/// Replacement addresses written into `header_bytes`: sources become the
/// all-zeros address and destinations its successor, keeping the two sides
/// distinguishable without retaining real endpoints.
const ANON_SRC_V4: [u8; 4] = [0, 0, 0, 0];
const ANON_DST_V4: [u8; 4] = [0, 0, 0, 1];
const ANON_SRC_V6: [u8; 16] = [0; 16];
const ANON_DST_V6: [u8; 16] = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1];

/// Split one raw packet into anonymized header bytes, payload bytes, and a
/// canonical flow key.
///
/// Header bytes are the IP header (options included) concatenated with the
/// TCP/UDP header; the link layer is stripped. Checksums are left as
/// captured, so a record differs from the wire bytes only in its address
/// fields. Errors mark self-contradictory packets; truncation by the
/// capture process is a skip, not an error.
pub fn extract_packet_record(pkt: &RawPacket) -> Result<Extraction, IngestError> {
    let ip_start = match link_layer_offset(pkt) {
        Ok(offset) => offset,
        Err(skip) => return Ok(Extraction::Skip(skip)),
    };
    let ip = &pkt.data[ip_start..];
    if ip.is_empty() {
        return Ok(Extraction::Skip(SkipReason::Truncated));
    }
    let version = ip[0] >> 4;
    let expects = ethertype_version(pkt, ip_start);
    if let Some(expected) = expects {
        if version != expected {
            return Err(IngestError::MalformedIP(format!(
                "version nibble {version} under an ethertype promising IPv{expected}"
            )));
        }
    }
    match version {
        4 => decode_ipv4(pkt, ip),
        6 => decode_ipv6(pkt, ip),
        _ => Ok(Extraction::Skip(SkipReason::NonIp)),
    }
}

/// Offset of the IP header within the frame, or a skip for link layers we
/// do not decode. Handles exactly one VLAN tag.
fn link_layer_offset(pkt: &RawPacket) -> Result<usize, SkipReason> {
    match pkt.link_type {
        LINKTYPE_RAW | LINKTYPE_IPV4 | LINKTYPE_IPV6 => Ok(0),
        LINKTYPE_ETHERNET => {
            if pkt.data.len() < 14 {
                return Err(SkipReason::Truncated);
            }
            let ethertype = u16::from_be_bytes([pkt.data[12], pkt.data[13]]);
            match ethertype {
                ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => Ok(14),
                ETHERTYPE_VLAN => {
                    if pkt.data.len() < 18 {
                        return Err(SkipReason::Truncated);
                    }
                    let inner = u16::from_be_bytes([pkt.data[16], pkt.data[17]]);
                    match inner {
                        ETHERTYPE_IPV4 | ETHERTYPE_IPV6 => Ok(18),
                        _ => Err(SkipReason::NonIp),
                    }
                }
                _ => Err(SkipReason::NonIp),
            }
        }
        _ => Err(SkipReason::UnsupportedLinkType),
    }
}

/// IP version the link layer promised, if it promised one.
fn ethertype_version(pkt: &RawPacket, ip_start: usize) -> Option<u8> {
    match (pkt.link_type, ip_start) {
        (LINKTYPE_IPV4, _) => Some(4),
        (LINKTYPE_IPV6, _) => Some(6),
        (LINKTYPE_ETHERNET, offset) => {
            let ethertype = u16::from_be_bytes([pkt.data[offset - 2], pkt.data[offset - 1]]);
            match ethertype {
                ETHERTYPE_IPV4 => Some(4),
                ETHERTYPE_IPV6 => Some(6),
                _ => None,
            }
        }
        _ => None,
    }
}

fn decode_ipv4(pkt: &RawPacket, ip: &[u8]) -> Result<Extraction, IngestError> {
    if ip.len() < 20 {
        return Ok(Extraction::Skip(SkipReason::Truncated));
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < 20 {
        return Err(IngestError::MalformedIP(format!("IHL of {} bytes", ihl)));
    }
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if total_len < ihl {
        return Err(IngestError::MalformedIP(format!(
            "total length {total_len} smaller than the {ihl}-byte header it declares"
        )));
    }
    if ip.len() < total_len {
        // Classic snaplen truncation: the wire packet was longer than what
        // the capture kept.
        return Ok(Extraction::Skip(SkipReason::Truncated));
    }
    let flags_frag = u16::from_be_bytes([ip[6], ip[7]]);
    let more_fragments = flags_frag & 0x2000 != 0;
    let fragment_offset = flags_frag & 0x1fff;
    if more_fragments || fragment_offset != 0 {
        return Ok(Extraction::Skip(SkipReason::Fragmented));
    }
    let proto = ip[9];
    if proto != PROTO_TCP && proto != PROTO_UDP {
        return Ok(Extraction::Skip(SkipReason::NonTcpUdp));
    }

    let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    let mut ip_header = ip[..ihl].to_vec();
    ip_header[12..16].copy_from_slice(&ANON_SRC_V4);
    ip_header[16..20].copy_from_slice(&ANON_DST_V4);
    // Ethernet padding past total_len is dropped here.
    let transport = &ip[ihl..total_len];
    finish_transport(pkt, proto, src, dst, ip_header, transport)
}

fn decode_ipv6(pkt: &RawPacket, ip: &[u8]) -> Result<Extraction, IngestError> {
    if ip.len() < 40 {
        return Ok(Extraction::Skip(SkipReason::Truncated));
    }
    let payload_len = usize::from(u16::from_be_bytes([ip[4], ip[5]]));
    let total_len = 40 + payload_len;
    if ip.len() < total_len {
        return Ok(Extraction::Skip(SkipReason::Truncated));
    }
    let next_header = ip[6];
    if IPV6_EXTENSION_HEADERS.contains(&next_header) {
        return Ok(Extraction::Skip(SkipReason::Ipv6Extension));
    }
    if next_header != PROTO_TCP && next_header != PROTO_UDP {
        return Ok(Extraction::Skip(SkipReason::NonTcpUdp));
    }

    let src_octets: [u8; 16] = ip[8..24].try_into().expect("fixed slice");
    let dst_octets: [u8; 16] = ip[24..40].try_into().expect("fixed slice");
    let src = IpAddr::V6(Ipv6Addr::from(src_octets));
    let dst = IpAddr::V6(Ipv6Addr::from(dst_octets));
    let mut ip_header = ip[..40].to_vec();
    ip_header[8..24].copy_from_slice(&ANON_SRC_V6);
    ip_header[24..40].copy_from_slice(&ANON_DST_V6);
    let transport = &ip[40..total_len];
    finish_transport(pkt, next_header, src, dst, ip_header, transport)
}

/// Split the transport header from the payload and assemble the record.
/// `transport` is bounded by the IP-declared packet length, so by this
/// point every inconsistency is the packet's own fault, not the capture's.
fn finish_transport(
    pkt: &RawPacket,
    proto: u8,
    src: IpAddr,
    dst: IpAddr,
    mut ip_header: Vec<u8>,
    transport: &[u8],
) -> Result<Extraction, IngestError> {
    let header_len = match proto {
        PROTO_TCP => {
            if transport.len() < 20 {
                return Err(IngestError::MalformedTransport(format!(
                    "{}-byte IP payload cannot hold a TCP header",
                    transport.len()
                )));
            }
            let data_offset = usize::from(transport[12] >> 4);
            if data_offset < 5 {
                return Err(IngestError::MalformedTransport(format!(
                    "TCP data offset of {data_offset} words"
                )));
            }
            if data_offset * 4 > transport.len() {
                return Err(IngestError::MalformedTransport(format!(
                    "TCP header of {} bytes overruns the {}-byte IP payload",
                    data_offset * 4,
                    transport.len()
                )));
            }
            data_offset * 4
        }
        PROTO_UDP => {
            if transport.len() < 8 {
                return Err(IngestError::MalformedTransport(format!(
                    "{}-byte IP payload cannot hold a UDP header",
                    transport.len()
                )));
            }
            8
        }
        _ => unreachable!("callers filter to TCP/UDP"),
    };
    let src_port = u16::from_be_bytes([transport[0], transport[1]]);
    let dst_port = u16::from_be_bytes([transport[2], transport[3]]);
    let (flow_key, direction) = FlowKey::canonical(src, src_port, dst, dst_port, proto);
    ip_header.extend_from_slice(&transport[..header_len]);
    Ok(Extraction::Record(Box::new(PacketRecord {
        flow_key,
        direction,
        header_bytes: ip_header,
        payload_bytes: transport[header_len..].to_vec(),
        capture_ts: pkt.capture_ts,
    })))
}
