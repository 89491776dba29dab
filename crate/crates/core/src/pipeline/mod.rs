//! Stateless per-packet forwarding.
//!
//! [`process_packet`] runs the five match-action stages in order against one
//! immutable [`PipelineTables`] snapshot:
//!
//! 1. layer-2 input filter (frame mode only)
//! 2. layer-3 input filter, selecting the instance
//! 3. calendar epoch assignment (LPM on the event number)
//! 4. calendar to member map (event number & 0x1FF)
//! 5. member lookup and rewrite
//!
//! It reads nothing else, so any number of workers can call it concurrently.

mod counters;
pub mod lpm;
mod snapshot;
mod tables;
mod types;

use std::net::SocketAddr;

pub use counters::{CounterSnapshot, PipelineCounters, SlotUsage, SlotUsageReport};
pub use lpm::{Prefix, PrefixError, PrefixTrie};
pub use snapshot::SnapshotCell;
pub use tables::{
    EventRange, InstanceEpochs, IntegrityError, L3Entry, LbIdentity, PipelineMode,
    PipelineTables, TableFootprint,
};
pub use types::{
    ipv6_solicited_node, AddrFamily, Calendar, CalendarLenError, EpochId, InstanceId,
    InstanceOutOfRange, MacAddr, MacParseError, MemberId, MemberRewrite, RewriteError,
    CALENDAR_SLOTS, MAX_INSTANCES,
};

use crate::protocol::{decode_lb_header, DiscardReason, LB_HEADER_LEN};

/// Calendar slot for an event number: its 9 least significant bits.
#[inline]
pub fn slot_of(event_number: u64) -> usize {
    (event_number & 0x1FF) as usize
}

/// Destination port for an entropy value: `base + (entropy & (2^width - 1))`.
///
/// Callers guarantee `width <= 16` and that the range fits in a u16, which
/// [`MemberRewrite::validate`] enforces for installed members.
#[inline]
pub fn entropy_port(base: u16, width: u8, entropy: u16) -> u16 {
    debug_assert!(width <= 16);
    let mask = ((1u32 << width) - 1) as u16;
    base + (entropy & mask)
}

/// Link-layer details of a received frame (frame mode only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkMeta {
    pub input_port: u16,
    pub dst_mac: crate::pipeline::MacAddr,
}

/// Link-layer rewrite applied to a forwarded frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkRewrite {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
}

/// A datagram arriving at the balancer.
#[derive(Debug, Clone, Copy)]
pub struct Inbound<'a> {
    pub link: Option<LinkMeta>,
    pub src: SocketAddr,
    /// In socket mode: the local address that received the datagram.
    pub dst: SocketAddr,
    pub udp_payload: &'a [u8],
}

/// The rewritten datagram, ready to send to a compute node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Forwarded<'a> {
    pub instance: InstanceId,
    pub epoch: EpochId,
    pub member: MemberId,
    pub event_number: u64,
    pub entropy: u16,
    pub link: Option<LinkRewrite>,
    /// Balancer address, with the data source's UDP source port.
    pub src: SocketAddr,
    pub dst: SocketAddr,
    /// Input payload with the LB header removed.
    pub payload: &'a [u8],
}

pub fn process_packet<'a>(
    pkt: &Inbound<'a>,
    tables: &PipelineTables,
) -> Result<Forwarded<'a>, DiscardReason> {
    let link = match tables.mode {
        PipelineMode::Frame => {
            let meta = pkt.link.ok_or(DiscardReason::L2Reject)?;
            let lb_mac = tables
                .l2_lookup(meta.input_port, meta.dst_mac)
                .ok_or(DiscardReason::L2Reject)?;
            Some((meta, lb_mac))
        }
        PipelineMode::Socket => None,
    };

    let dst_ip = pkt.dst.ip();
    let l3 = tables
        .l3_lookup(link.map(|(m, _)| m.input_port), dst_ip)
        .ok_or(DiscardReason::L3Reject)?;

    if pkt.dst.port() != tables.service_port {
        return Err(DiscardReason::NotLbPort);
    }

    let header = decode_lb_header(pkt.udp_payload, tables.expected_version)?;

    let epoch = tables
        .lookup_epoch(l3.instance, header.event_number)
        .ok_or(DiscardReason::NoEpoch)?;
    let calendar = tables
        .calendar(l3.instance, epoch)
        .ok_or(DiscardReason::NoEpoch)?;
    let member = calendar
        .slot(slot_of(header.event_number))
        .ok_or(DiscardReason::EmptySlot)?;

    let rewrite = tables
        .member(l3.instance, member)
        .ok_or(DiscardReason::NoMember)?;
    let cn_ip = rewrite
        .address(AddrFamily::of(&dst_ip))
        .ok_or(DiscardReason::NoMember)?;
    let port = entropy_port(rewrite.udp_base_port, rewrite.entropy_bits, header.entropy);

    Ok(Forwarded {
        instance: l3.instance,
        epoch,
        member,
        event_number: header.event_number,
        entropy: header.entropy,
        link: link.map(|(_, lb_mac)| LinkRewrite {
            src_mac: lb_mac,
            dst_mac: rewrite.next_hop_mac,
        }),
        src: SocketAddr::new(l3.lb_src, pkt.src.port()),
        dst: SocketAddr::new(cn_ip, port),
        payload: &pkt.udp_payload[LB_HEADER_LEN..],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{build_calendar, ControlPlane, MemberSpec};
    use crate::protocol::LbHeader;
    use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

    const LB4: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);
    const LB6: Ipv6Addr = Ipv6Addr::new(0x2001, 0xdb8, 0, 0, 0, 0, 0, 1);
    const LB_MAC: MacAddr = MacAddr([2, 0, 0, 0, 0, 1]);

    fn member(id: u16) -> MemberSpec {
        MemberSpec {
            member: MemberId(id),
            ipv4: Some(Ipv4Addr::new(10, 0, 0, id as u8)),
            ipv6: Some(Ipv6Addr::new(0xfd00, 0, 0, 0, 0, 0, 0, id)),
            next_hop_mac: MacAddr([2, 0, 0, 0, 1, id as u8]),
            udp_base_port: 10_000,
            entropy_bits: 2,
            weight: 1.0,
        }
    }

    fn tables(mode: PipelineMode, members: &[MemberSpec]) -> PipelineTables {
        let mut cp = ControlPlane::new(mode);
        cp.install_identity(
            InstanceId::ZERO,
            &LbIdentity {
                mac: LB_MAC,
                ipv4: Some(LB4),
                ipv6: Some(LB6),
            },
        );
        cp.initialize_instance(InstanceId::ZERO, members).unwrap();
        PipelineTables::clone(cp.tables())
    }

    fn datagram(event: u64, entropy: u16, payload: &[u8]) -> Vec<u8> {
        let mut v = LbHeader::new(event, entropy).encode().to_vec();
        v.extend_from_slice(payload);
        v
    }

    fn inbound(dst: IpAddr, bytes: &[u8]) -> Inbound<'_> {
        Inbound {
            link: Some(LinkMeta {
                input_port: 0,
                dst_mac: LB_MAC,
            }),
            src: SocketAddr::new("198.51.100.7".parse().unwrap(), 40_000),
            dst: SocketAddr::new(dst, 19522),
            udp_payload: bytes,
        }
    }

    #[test]
    fn slot_of_masks_nine_bits() {
        assert_eq!(slot_of(0), 0);
        assert_eq!(slot_of(511), 511);
        assert_eq!(slot_of(512), 0);
        assert_eq!(slot_of(1930), 394);
        assert_eq!(slot_of(u64::MAX), 511);
    }

    #[test]
    fn entropy_port_examples() {
        for e in [0, 1, 0x1234, 0xFFFF] {
            assert_eq!(entropy_port(1000, 0, e), 1000);
        }
        assert_eq!(entropy_port(1000, 3, 0xFFFF), 1007);
        assert_eq!(entropy_port(0, 16, 0xFFFF), 0xFFFF);
    }

    #[test]
    fn entropy_port_uniform_over_range() {
        for width in 0..=8u8 {
            let mut hits = vec![0u32; 1 << width];
            for e in 0..=u16::MAX {
                let p = entropy_port(1000, width, e);
                hits[usize::from(p - 1000)] += 1;
            }
            let expect = 65536 >> width;
            assert!(hits.iter().all(|h| *h == expect), "width {width}");
        }
    }

    #[test]
    fn single_member_takes_everything() {
        let t = tables(PipelineMode::Frame, &[member(0)]);
        for event in [0u64, 1, 511, 512, 1 << 40, u64::MAX] {
            let bytes = datagram(event, 3, b"x");
            let out = process_packet(&inbound(IpAddr::V4(LB4), &bytes), &t).unwrap();
            assert_eq!(out.member, MemberId(0));
            assert_eq!(out.dst, "10.0.0.0:10003".parse().unwrap());
        }
    }

    #[test]
    fn rewrite_fields() {
        let t = tables(PipelineMode::Frame, &[member(5)]);
        let bytes = datagram(77, 0xFFFE, b"payload bytes");
        let out = process_packet(&inbound(IpAddr::V6(LB6), &bytes), &t).unwrap();
        assert_eq!(out.src, SocketAddr::new(IpAddr::V6(LB6), 40_000));
        assert_eq!(
            out.dst,
            SocketAddr::new("fd00::5".parse().unwrap(), 10_002)
        );
        assert_eq!(out.payload, b"payload bytes");
        assert_eq!(
            out.link,
            Some(LinkRewrite {
                src_mac: LB_MAC,
                dst_mac: MacAddr([2, 0, 0, 0, 1, 5])
            })
        );
        assert_eq!(out.event_number, 77);
        assert_eq!(out.entropy, 0xFFFE);
    }

    #[test]
    fn address_family_preserved() {
        let t = tables(PipelineMode::Frame, &[member(1), member(2)]);
        for event in 0..64 {
            let bytes = datagram(event, 0, b"");
            let v4 = process_packet(&inbound(IpAddr::V4(LB4), &bytes), &t).unwrap();
            let v6 = process_packet(&inbound(IpAddr::V6(LB6), &bytes), &t).unwrap();
            assert!(v4.dst.is_ipv4() && v4.src.is_ipv4());
            assert!(v6.dst.is_ipv6() && v6.src.is_ipv6());
            assert_eq!(v4.member, v6.member);
        }
    }

    #[test]
    fn filter_rejections() {
        let t = tables(PipelineMode::Frame, &[member(0)]);
        let bytes = datagram(1, 0, b"");

        let mut pkt = inbound("192.0.2.99".parse().unwrap(), &bytes);
        assert_eq!(process_packet(&pkt, &t), Err(DiscardReason::L3Reject));

        pkt = inbound(IpAddr::V4(LB4), &bytes);
        pkt.link = Some(LinkMeta {
            input_port: 3,
            dst_mac: MacAddr([2, 0, 0, 0, 0, 9]),
        });
        assert_eq!(process_packet(&pkt, &t), Err(DiscardReason::L2Reject));
        pkt.link = None;
        assert_eq!(process_packet(&pkt, &t), Err(DiscardReason::L2Reject));

        // broadcast and solicited-node MACs are accepted at layer 2
        pkt.link = Some(LinkMeta {
            input_port: 3,
            dst_mac: MacAddr::BROADCAST,
        });
        assert!(process_packet(&pkt, &t).is_ok());

        pkt = inbound(IpAddr::V4(LB4), &bytes);
        pkt.dst.set_port(19523);
        assert_eq!(process_packet(&pkt, &t), Err(DiscardReason::NotLbPort));
    }

    #[test]
    fn socket_mode_skips_layer_two() {
        let t = tables(PipelineMode::Socket, &[member(0)]);
        let bytes = datagram(1, 0, b"");
        let mut pkt = inbound(IpAddr::V4(LB4), &bytes);
        pkt.link = None;
        let out = process_packet(&pkt, &t).unwrap();
        assert_eq!(out.link, None);
    }

    #[test]
    fn header_discards() {
        let t = tables(PipelineMode::Frame, &[member(0)]);
        let short = [0x4C, 0x42, 1];
        assert_eq!(
            process_packet(&inbound(IpAddr::V4(LB4), &short), &t),
            Err(DiscardReason::Truncated)
        );
        let mut bad = datagram(1, 0, b"");
        bad[1] = b'C';
        assert_eq!(
            process_packet(&inbound(IpAddr::V4(LB4), &bad), &t),
            Err(DiscardReason::BadMagic)
        );
        let mut v2 = datagram(1, 0, b"");
        v2[2] = 2;
        assert_eq!(
            process_packet(&inbound(IpAddr::V4(LB4), &v2), &t),
            Err(DiscardReason::BadVersion)
        );
    }

    #[test]
    fn empty_slot_and_missing_member_discard() {
        let mut t = tables(PipelineMode::Frame, &[member(0)]);
        let epoch = t.instance(InstanceId::ZERO).unwrap().current();
        let mut cal = Calendar::uniform(MemberId(0));
        cal.set(7, None);
        cal.set(8, Some(MemberId(99)));
        t.insert_calendar(InstanceId::ZERO, epoch, cal);

        let seven = datagram(7, 0, b"");
        assert_eq!(
            process_packet(&inbound(IpAddr::V4(LB4), &seven), &t),
            Err(DiscardReason::EmptySlot)
        );
        let eight = datagram(8, 0, b"");
        assert_eq!(
            process_packet(&inbound(IpAddr::V4(LB4), &eight), &t),
            Err(DiscardReason::NoMember)
        );
        let nine = datagram(9, 0, b"");
        assert!(process_packet(&inbound(IpAddr::V4(LB4), &nine), &t).is_ok());
    }

    #[test]
    fn unconfigured_instance_has_no_epoch() {
        let mut t = tables(PipelineMode::Frame, &[member(0)]);
        let other: IpAddr = "192.0.2.50".parse().unwrap();
        t.install_l3(
            None,
            other,
            L3Entry {
                lb_src: other,
                instance: InstanceId::new(2).unwrap(),
            },
        );
        let bytes = datagram(1, 0, b"");
        assert_eq!(
            process_packet(&inbound(other, &bytes), &t),
            Err(DiscardReason::NoEpoch)
        );
    }

    #[test]
    fn weighted_sweep_counts_exactly() {
        let mut specs = vec![member(0), member(1)];
        specs[0].weight = 2.0;
        let mut t = tables(PipelineMode::Frame, &specs);
        // 341/171 split from an explicit calendar
        let cal = build_calendar(&[(MemberId(0), 341.0), (MemberId(1), 171.0)]).unwrap();
        let epoch = t.instance(InstanceId::ZERO).unwrap().current();
        t.insert_calendar(InstanceId::ZERO, epoch, cal);
        let mut counts = [0usize; 2];
        for event in 0..512u64 {
            let bytes = datagram(event, 0, b"");
            let out = process_packet(&inbound(IpAddr::V4(LB4), &bytes), &t).unwrap();
            counts[usize::from(out.member.0)] += 1;
        }
        assert_eq!(counts, [341, 171]);
    }

    #[test]
    fn payload_is_not_inspected() {
        let t = tables(PipelineMode::Frame, &[member(0), member(1), member(2)]);
        let a = datagram(1234, 5, &[0u8; 100]);
        let b = datagram(1234, 5, &[0xFFu8; 8000]);
        let oa = process_packet(&inbound(IpAddr::V4(LB4), &a), &t).unwrap();
        let ob = process_packet(&inbound(IpAddr::V4(LB4), &b), &t).unwrap();
        assert_eq!((oa.dst, oa.member), (ob.dst, ob.member));
    }
}
