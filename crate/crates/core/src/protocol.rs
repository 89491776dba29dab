//! The Load Balancer Protocol header and the datagrams that carry it.
//!
//! Every datagram a data source sends to the balancer starts with a fixed
//! 16-octet header, directly after the UDP header:
//!
//! ```text
//!  0       1       2       3
//! +-------+-------+-------+-------+
//! |  'L'  |  'B'  |Version|Protocl|
//! +-------+-------+-------+-------+
//! |     Rsvd      |    Entropy    |
//! +-------+-------+-------+-------+
//! |         Event Number          |
//! |           (64 bit)            |
//! +-------+-------+-------+-------+
//! ```
//!
//! All multi-octet fields are big-endian. The balancer never looks past
//! octet 16; the remainder of the datagram is opaque payload.

use std::fmt;
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};

/// Magic octets at the start of every LB header.
pub const LB_MAGIC: [u8; 2] = *b"LB";

/// Serialized header length in octets.
pub const LB_HEADER_LEN: usize = 16;

/// UDP destination port of the balancer service (0x4C42, "LB").
pub const LB_SERVICE_PORT: u16 = 0x4C42;

/// Header version accepted when no other version is configured.
pub const DEFAULT_LB_VERSION: u8 = 1;

/// Upper bound on the UDP payload of any datagram (jumbo frame).
pub const MAX_DATAGRAM_LEN: usize = 9000;

/// Decoded LB header.
///
/// The reserved field is not stored: it is written as zero and ignored when
/// decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LbHeader {
    pub version: u8,
    /// Carried opaque; the balancer gives it no meaning.
    pub protocol: u8,
    pub entropy: u16,
    pub event_number: u64,
}

impl LbHeader {
    pub fn new(event_number: u64, entropy: u16) -> Self {
        LbHeader {
            version: DEFAULT_LB_VERSION,
            protocol: 1,
            entropy,
            event_number,
        }
    }

    pub fn encode(&self) -> [u8; LB_HEADER_LEN] {
        encode_lb_header(self)
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.encode());
    }
}

/// Why the balancer dropped a datagram.
///
/// Discards are counted, never raised as faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiscardReason {
    L2Reject,
    L3Reject,
    NotLbPort,
    Truncated,
    BadMagic,
    BadVersion,
    NoEpoch,
    EmptySlot,
    NoMember,
}

impl DiscardReason {
    pub const ALL: [DiscardReason; 9] = [
        DiscardReason::L2Reject,
        DiscardReason::L3Reject,
        DiscardReason::NotLbPort,
        DiscardReason::Truncated,
        DiscardReason::BadMagic,
        DiscardReason::BadVersion,
        DiscardReason::NoEpoch,
        DiscardReason::EmptySlot,
        DiscardReason::NoMember,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DiscardReason::L2Reject => "l2_reject",
            DiscardReason::L3Reject => "l3_reject",
            DiscardReason::NotLbPort => "not_lb_port",
            DiscardReason::Truncated => "truncated",
            DiscardReason::BadMagic => "bad_magic",
            DiscardReason::BadVersion => "bad_version",
            DiscardReason::NoEpoch => "no_epoch",
            DiscardReason::EmptySlot => "empty_slot",
            DiscardReason::NoMember => "no_member",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn encode_lb_header(h: &LbHeader) -> [u8; LB_HEADER_LEN] {
    let mut out = [0u8; LB_HEADER_LEN];
    out[0..2].copy_from_slice(&LB_MAGIC);
    out[2] = h.version;
    out[3] = h.protocol;
    // octets 4..6 reserved, left zero
    out[6..8].copy_from_slice(&h.entropy.to_be_bytes());
    out[8..16].copy_from_slice(&h.event_number.to_be_bytes());
    out
}

/// Parses and validates the header at the start of a UDP payload.
///
/// Only the first [`LB_HEADER_LEN`] octets are examined.
pub fn decode_lb_header(bytes: &[u8], expected_version: u8) -> Result<LbHeader, DiscardReason> {
    let Some(hdr) = bytes.get(..LB_HEADER_LEN) else {
        return Err(DiscardReason::Truncated);
    };
    if hdr[0..2] != LB_MAGIC {
        return Err(DiscardReason::BadMagic);
    }
    if hdr[2] != expected_version {
        return Err(DiscardReason::BadVersion);
    }
    Ok(LbHeader {
        version: hdr[2],
        protocol: hdr[3],
        entropy: u16::from_be_bytes([hdr[6], hdr[7]]),
        event_number: u64::from_be_bytes(hdr[8..16].try_into().expect("8 octets")),
    })
}

/// An LB header plus the opaque payload that follows it: the UDP payload of
/// a datagram sent by a data source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbDatagram {
    pub header: LbHeader,
    pub payload: Vec<u8>,
}

impl LbDatagram {
    pub fn encoded_len(&self) -> usize {
        LB_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.header.write_to(&mut out);
        out.extend_from_slice(&self.payload);
        out
    }
}

/// A datagram as sent by a data source to the balancer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DaqPacket {
    pub src: SocketAddr,
    /// Must carry the balancer's service port.
    pub dst: SocketAddr,
    pub header: LbHeader,
    pub payload: Vec<u8>,
}

impl DaqPacket {
    pub fn new(src: SocketAddr, dst: SocketAddr, datagram: LbDatagram) -> Self {
        DaqPacket {
            src,
            dst,
            header: datagram.header,
            payload: datagram.payload,
        }
    }

    /// UDP payload octets: header followed by payload.
    pub fn udp_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LB_HEADER_LEN + self.payload.len());
        self.header.write_to(&mut out);
        out.extend_from_slice(&self.payload);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_header_layout() {
        let h = LbHeader {
            version: 1,
            protocol: 1,
            entropy: 0,
            event_number: 0,
        };
        let mut expected = [0u8; 16];
        expected[..4].copy_from_slice(&[0x4C, 0x42, 0x01, 0x01]);
        assert_eq!(encode_lb_header(&h), expected);
    }

    #[test]
    fn big_endian_layout() {
        let h = LbHeader {
            version: 1,
            protocol: 1,
            entropy: 0x00FF,
            event_number: 1900,
        };
        assert_eq!(
            encode_lb_header(&h),
            [
                0x4C, 0x42, 0x01, 0x01, 0x00, 0x00, 0x00, 0xFF, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
                0x07, 0x6C
            ]
        );
    }

    #[test]
    fn service_port_spells_lb() {
        assert_eq!(LB_SERVICE_PORT, 19522);
        assert_eq!(LB_SERVICE_PORT.to_be_bytes(), LB_MAGIC);
    }

    #[test]
    fn discard_reasons() {
        let good = LbHeader::new(42, 7).encode();
        assert_eq!(decode_lb_header(&good[..15], 1), Err(DiscardReason::Truncated));
        assert_eq!(decode_lb_header(&[], 1), Err(DiscardReason::Truncated));

        let mut bad = good;
        bad[0] = 0x4D;
        assert_eq!(decode_lb_header(&bad, 1), Err(DiscardReason::BadMagic));

        assert_eq!(decode_lb_header(&good, 2), Err(DiscardReason::BadVersion));
    }

    #[test]
    fn reserved_field_ignored_on_receive() {
        let mut bytes = LbHeader::new(5, 9).encode();
        bytes[4] = 0xAB;
        bytes[5] = 0xCD;
        assert_eq!(decode_lb_header(&bytes, 1), Ok(LbHeader::new(5, 9)));
    }

    #[test]
    fn trailing_bytes_not_examined() {
        let h = LbHeader::new(u64::MAX, 0xBEEF);
        let mut a = h.encode().to_vec();
        let mut b = a.clone();
        a.extend_from_slice(&[0u8; 100]);
        b.extend_from_slice(&[0xFFu8; 3]);
        assert_eq!(decode_lb_header(&a, 1), Ok(h));
        assert_eq!(decode_lb_header(&b, 1), Ok(h));
    }

    #[test]
    fn daq_packet_payload_layout() {
        let src: SocketAddr = "10.0.0.1:5000".parse().unwrap();
        let dst: SocketAddr = "10.0.0.2:19522".parse().unwrap();
        let pkt = DaqPacket::new(
            src,
            dst,
            LbDatagram {
                header: LbHeader::new(3, 4),
                payload: b"hello".to_vec(),
            },
        );
        let wire = pkt.udp_payload();
        assert_eq!(wire.len(), 21);
        assert_eq!(&wire[16..], b"hello");
        assert_eq!(decode_lb_header(&wire, 1), Ok(pkt.header));
    }
}
