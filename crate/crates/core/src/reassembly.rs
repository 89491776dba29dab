//! Segmentation of event data bundles and order-free reassembly.
//!
//! Each segment carries a 20-octet header after the LB header. The load
//! balancer never looks at it; the LB header is stripped in transit, so the
//! event number is repeated here.
//!
//! ```text
//!  0        1        2-3             4-7           8-11          12-19
//! +--------+--------+---------------+-------------+-------------+----------------+
//! | ver    | flags  | data source   | byte offset | bundle len  | event number   |
//! +--------+--------+---------------+-------------+-------------+----------------+
//! ```
//!
//! All fields are big-endian. Flag bit 0 marks the last segment.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::protocol::{LbDatagram, LbHeader, LB_HEADER_LEN, MAX_DATAGRAM_LEN};

pub const SEGMENT_HEADER_LEN: usize = 20;
pub const RE_VERSION: u8 = 1;
pub const FLAG_LAST: u8 = 0x01;

/// Largest segment (header + data) that still fits a datagram.
pub const MAX_MTU_PAYLOAD: usize = MAX_DATAGRAM_LEN - LB_HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentHeader {
    pub re_version: u8,
    pub flags: u8,
    pub data_source_id: u16,
    pub byte_offset: u32,
    pub bundle_total_length: u32,
    pub event_number: u64,
}

impl SegmentHeader {
    pub fn is_last(&self) -> bool {
        self.flags & FLAG_LAST != 0
    }

    pub fn encode(&self) -> [u8; SEGMENT_HEADER_LEN] {
        let mut b = [0u8; SEGMENT_HEADER_LEN];
        b[0] = self.re_version;
        b[1] = self.flags;
        b[2..4].copy_from_slice(&self.data_source_id.to_be_bytes());
        b[4..8].copy_from_slice(&self.byte_offset.to_be_bytes());
        b[8..12].copy_from_slice(&self.bundle_total_length.to_be_bytes());
        b[12..20].copy_from_slice(&self.event_number.to_be_bytes());
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<SegmentHeader, ReassemblyError> {
        if bytes.len() < SEGMENT_HEADER_LEN {
            return Err(ReassemblyError::Malformed("segment shorter than header"));
        }
        let h = SegmentHeader {
            re_version: bytes[0],
            flags: bytes[1],
            data_source_id: u16::from_be_bytes([bytes[2], bytes[3]]),
            byte_offset: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            bundle_total_length: u32::from_be_bytes(bytes[8..12].try_into().unwrap()),
            event_number: u64::from_be_bytes(bytes[12..20].try_into().unwrap()),
        };
        if h.re_version != RE_VERSION {
            return Err(ReassemblyError::Malformed("unsupported segment version"));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("bundle of {0} bytes exceeds the 32-bit length field")]
    BundleTooLarge(usize),
    #[error("mtu payload {0} must be in ({SEGMENT_HEADER_LEN}, {MAX_MTU_PAYLOAD}]")]
    InvalidMtu(usize),
}

/// Splits a bundle into datagrams of at most `mtu_payload` octets after the
/// LB header. Every datagram carries the same event number and entropy.
pub fn segment_bundle(
    bundle: &[u8],
    event_number: u64,
    entropy: u16,
    source_id: u16,
    mtu_payload: usize,
) -> Result<Vec<LbDatagram>, SegmentError> {
    if mtu_payload <= SEGMENT_HEADER_LEN || mtu_payload > MAX_MTU_PAYLOAD {
        return Err(SegmentError::InvalidMtu(mtu_payload));
    }
    let total = u32::try_from(bundle.len()).map_err(|_| SegmentError::BundleTooLarge(bundle.len()))?;
    let chunk = mtu_payload - SEGMENT_HEADER_LEN;
    let header = LbHeader::new(event_number, entropy);
    let mut out = Vec::with_capacity(bundle.len() / chunk + 1);
    let mut offset = 0usize;
    loop {
        let end = (offset + chunk).min(bundle.len());
        let seg = SegmentHeader {
            re_version: RE_VERSION,
            flags: if end == bundle.len() { FLAG_LAST } else { 0 },
            data_source_id: source_id,
            byte_offset: offset as u32,
            bundle_total_length: total,
            event_number,
        };
        let mut payload = Vec::with_capacity(SEGMENT_HEADER_LEN + end - offset);
        payload.extend_from_slice(&seg.encode());
        payload.extend_from_slice(&bundle[offset..end]);
        out.push(LbDatagram { header, payload });
        if end == bundle.len() {
            break;
        }
        offset = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReassemblyError {
    #[error("malformed segment: {0}")]
    Malformed(&'static str),
    #[error("segment for source {source_id} event {event_number} contradicts data already received")]
    CorruptSegment { source_id: u16, event_number: u64 },
    #[error("buffering {requested} more bytes would exceed the {cap} byte cap")]
    BufferLimitExceeded { requested: usize, cap: usize },
    #[error("source {source_id} event {event_number} expired before completion")]
    Expired { source_id: u16, event_number: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedBundle {
    pub source_id: u16,
    pub event_number: u64,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Progress {
    Complete(CompletedBundle),
    Pending,
    /// Every byte of the segment had already been received.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReassemblyConfig {
    pub timeout: Duration,
    /// Cap on bytes held by incomplete buffers.
    pub max_buffered_bytes: usize,
    /// How many finished keys to remember so late duplicates are recognised.
    pub remembered_keys: usize,
}

impl Default for ReassemblyConfig {
    fn default() -> Self {
        ReassemblyConfig {
            timeout: Duration::from_millis(500),
            max_buffered_bytes: 256 << 20,
            remembered_keys: 65536,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReassemblyStats {
    pub segments: u64,
    pub completed: u64,
    pub duplicates: u64,
    pub expired: u64,
    pub corrupt: u64,
    pub rejected_for_memory: u64,
}

type Key = (u16, u64);

#[derive(Debug)]
struct Buffer {
    total: u32,
    data: Vec<u8>,
    /// Disjoint received ranges, start -> end.
    ranges: BTreeMap<u32, u32>,
    received: u64,
    deadline: Duration,
}

impl Buffer {
    /// Pieces of `[start, end)` not yet received.
    fn gaps(&self, start: u32, end: u32) -> Vec<(u32, u32)> {
        let mut gaps = Vec::new();
        let mut cur = start;
        let first = self
            .ranges
            .range(..=start)
            .next_back()
            .map(|(s, _)| *s)
            .unwrap_or(start);
        for (&s, &e) in self.ranges.range(first..end) {
            if e <= cur {
                continue;
            }
            if s > cur {
                gaps.push((cur, s.min(end)));
            }
            cur = cur.max(e);
            if cur >= end {
                break;
            }
        }
        if cur < end {
            gaps.push((cur, end));
        }
        gaps
    }

    fn insert_range(&mut self, start: u32, end: u32) {
        let mut s = start;
        let mut e = end;
        if let Some((&ps, &pe)) = self.ranges.range(..=s).next_back() {
            if pe >= s {
                s = ps;
                e = e.max(pe);
                self.ranges.remove(&ps);
            }
        }
        while let Some((&ns, &ne)) = self.ranges.range(s..=e).next() {
            e = e.max(ne);
            self.ranges.remove(&ns);
        }
        self.ranges.insert(s, e);
    }
}

/// Reassembles bundles from segments arriving in any order.
///
/// One instance serves one receive port; segments of one bundle share an
/// entropy value and therefore always reach the same port.
#[derive(Debug)]
pub struct Reassembler {
    cfg: ReassemblyConfig,
    buffers: HashMap<Key, Buffer>,
    buffered: usize,
    finished: HashSet<Key>,
    finished_order: VecDeque<Key>,
    expired: HashSet<Key>,
    stats: ReassemblyStats,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(ReassemblyConfig::default())
    }
}

impl Reassembler {
    pub fn new(cfg: ReassemblyConfig) -> Self {
        Reassembler {
            cfg,
            buffers: HashMap::new(),
            buffered: 0,
            finished: HashSet::new(),
            finished_order: VecDeque::new(),
            expired: HashSet::new(),
            stats: ReassemblyStats::default(),
        }
    }

    pub fn stats(&self) -> ReassemblyStats {
        self.stats
    }

    pub fn buffered_bytes(&self) -> usize {
        self.buffered
    }

    pub fn pending(&self) -> usize {
        self.buffers.len()
    }

    fn remember(&mut self, key: Key, expired: bool) {
        if expired {
            self.expired.insert(key);
        }
        if self.finished.insert(key) {
            self.finished_order.push_back(key);
        }
        while self.finished_order.len() > self.cfg.remembered_keys {
            if let Some(old) = self.finished_order.pop_front() {
                self.finished.remove(&old);
                self.expired.remove(&old);
            }
        }
    }

    fn drop_buffer(&mut self, key: Key) -> Option<Buffer> {
        let b = self.buffers.remove(&key)?;
        self.buffered -= b.total as usize;
        Some(b)
    }

    /// Feeds one segment (the payload after the LB header).
    pub fn push(&mut self, segment: &[u8], now: Duration) -> Result<Progress, ReassemblyError> {
        self.stats.segments += 1;
        let h = SegmentHeader::decode(segment)?;
        let data = &segment[SEGMENT_HEADER_LEN..];
        let key = (h.data_source_id, h.event_number);
        let corrupt = ReassemblyError::CorruptSegment {
            source_id: h.data_source_id,
            event_number: h.event_number,
        };

        let end = u64::from(h.byte_offset) + data.len() as u64;
        if end > u64::from(h.bundle_total_length) || h.is_last() != (end == u64::from(h.bundle_total_length)) {
            self.stats.corrupt += 1;
            return Err(corrupt);
        }
        let (start, end) = (h.byte_offset, end as u32);

        if self.finished.contains(&key) {
            if self.expired.contains(&key) {
                return Err(ReassemblyError::Expired {
                    source_id: key.0,
                    event_number: key.1,
                });
            }
            self.stats.duplicates += 1;
            return Ok(Progress::Duplicate);
        }

        if let Some(b) = self.buffers.get(&key) {
            if b.deadline <= now {
                self.drop_buffer(key);
                self.remember(key, true);
                self.stats.expired += 1;
                return Err(ReassemblyError::Expired {
                    source_id: key.0,
                    event_number: key.1,
                });
            }
            if b.total != h.bundle_total_length {
                self.stats.corrupt += 1;
                return Err(corrupt);
            }
        } else {
            let need = h.bundle_total_length as usize;
            if self.buffered + need > self.cfg.max_buffered_bytes {
                self.stats.rejected_for_memory += 1;
                return Err(ReassemblyError::BufferLimitExceeded {
                    requested: need,
                    cap: self.cfg.max_buffered_bytes,
                });
            }
            self.buffered += need;
            self.buffers.insert(
                key,
                Buffer {
                    total: h.bundle_total_length,
                    data: vec![0; need],
                    ranges: BTreeMap::new(),
                    received: 0,
                    deadline: now + self.cfg.timeout,
                },
            );
        }

        let b = self.buffers.get_mut(&key).expect("inserted above");
        let gaps = b.gaps(start, end);
        // Bytes already held must agree with the new copy.
        let mut cur = start;
        for &(gs, ge) in gaps.iter().chain(std::iter::once(&(end, end))) {
            let (s, e) = (cur as usize, gs as usize);
            if b.data[s..e] != data[s - start as usize..e - start as usize] {
                self.stats.corrupt += 1;
                return Err(corrupt);
            }
            cur = ge;
        }
        let fresh = !gaps.is_empty() || b.total == 0;
        for &(gs, ge) in &gaps {
            let (s, e) = (gs as usize, ge as usize);
            b.data[s..e].copy_from_slice(&data[s - start as usize..e - start as usize]);
            b.insert_range(gs, ge);
            b.received += u64::from(ge - gs);
        }
        if b.received < u64::from(b.total) {
            if !fresh {
                self.stats.duplicates += 1;
                return Ok(Progress::Duplicate);
            }
            return Ok(Progress::Pending);
        }

        let b = self.drop_buffer(key).expect("present");
        self.remember(key, false);
        self.stats.completed += 1;
        Ok(Progress::Complete(CompletedBundle {
            source_id: key.0,
            event_number: key.1,
            data: b.data,
        }))
    }

    /// Discards incomplete buffers whose deadline has passed and returns
    /// their keys. Each counts as a lost event.
    pub fn evict_expired(&mut self, now: Duration) -> Vec<(u16, u64)> {
        let mut gone: Vec<Key> = self
            .buffers
            .iter()
            .filter(|(_, b)| b.deadline <= now)
            .map(|(k, _)| *k)
            .collect();
        gone.sort_unstable();
        for k in &gone {
            self.drop_buffer(*k);
            self.remember(*k, true);
            self.stats.expired += 1;
        }
        gone
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T0: Duration = Duration::ZERO;

    fn bundle(len: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen()).collect()
    }

    fn feed(r: &mut Reassembler, segs: &[LbDatagram]) -> Vec<CompletedBundle> {
        let mut done = Vec::new();
        for s in segs {
            if let Progress::Complete(c) = r.push(&s.payload, T0).unwrap() {
                done.push(c);
            }
        }
        done
    }

    #[test]
    fn header_roundtrip() {
        let h = SegmentHeader {
            re_version: RE_VERSION,
            flags: FLAG_LAST,
            data_source_id: 0xBEEF,
            byte_offset: 0x0102_0304,
            bundle_total_length: 0xA0B0_C0D0,
            event_number: 0x1122_3344_5566_7788,
        };
        let b = h.encode();
        assert_eq!(&b[2..4], &[0xBE, 0xEF]);
        assert_eq!(&b[12..20], &[0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88]);
        assert_eq!(SegmentHeader::decode(&b).unwrap(), h);
        assert!(SegmentHeader::decode(&b[..19]).is_err());
    }

    #[test]
    fn empty_bundle_is_one_last_segment() {
        let segs = segment_bundle(&[], 7, 3, 1, 1000).unwrap();
        assert_eq!(segs.len(), 1);
        let h = SegmentHeader::decode(&segs[0].payload).unwrap();
        assert_eq!((h.byte_offset, h.bundle_total_length, h.is_last()), (0, 0, true));
        let mut r = Reassembler::default();
        let done = feed(&mut r, &segs);
        assert_eq!(done[0].data, Vec::<u8>::new());
    }

    #[test]
    fn exact_fit_is_one_segment() {
        let mtu = 1000;
        let segs = segment_bundle(&bundle(mtu - SEGMENT_HEADER_LEN, 1), 1, 1, 1, mtu).unwrap();
        assert_eq!(segs.len(), 1);
        let segs = segment_bundle(&bundle(mtu - SEGMENT_HEADER_LEN + 1, 1), 1, 1, 1, mtu).unwrap();
        assert_eq!(segs.len(), 2);
    }

    #[test]
    fn segments_share_event_and_entropy_and_fit() {
        let b = bundle(100_000, 2);
        let segs = segment_bundle(&b, 42, 0x1234, 9, MAX_MTU_PAYLOAD).unwrap();
        for s in &segs {
            assert_eq!(s.header.event_number, 42);
            assert_eq!(s.header.entropy, 0x1234);
            assert!(s.encoded_len() <= MAX_DATAGRAM_LEN);
        }
        let joined: Vec<u8> = segs
            .iter()
            .flat_map(|s| s.payload[SEGMENT_HEADER_LEN..].to_vec())
            .collect();
        assert_eq!(joined, b);
    }

    #[test]
    fn mtu_bounds() {
        assert_eq!(segment_bundle(&[1], 0, 0, 0, 20), Err(SegmentError::InvalidMtu(20)));
        assert_eq!(
            segment_bundle(&[1], 0, 0, 0, MAX_MTU_PAYLOAD + 1),
            Err(SegmentError::InvalidMtu(MAX_MTU_PAYLOAD + 1))
        );
        assert!(segment_bundle(&[1], 0, 0, 0, 21).is_ok());
    }

    #[test]
    fn reverse_order_and_duplicates() {
        let b = bundle(50_000, 3);
        let mut segs = segment_bundle(&b, 5, 0, 2, 1500).unwrap();
        segs.reverse();
        let mut r = Reassembler::default();
        let dup = segs[3].clone();
        assert_eq!(r.push(&dup.payload, T0).unwrap(), Progress::Pending);
        assert_eq!(r.push(&dup.payload, T0).unwrap(), Progress::Duplicate);
        let done = feed(&mut r, &segs);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].data, b);
        assert_eq!(r.push(&dup.payload, T0).unwrap(), Progress::Duplicate);
        assert_eq!(r.buffered_bytes(), 0);
        assert_eq!(r.stats().completed, 1);
    }

    #[test]
    fn inconsistent_overlap_is_corrupt() {
        let b = bundle(3000, 4);
        let segs = segment_bundle(&b, 1, 0, 1, 1020).unwrap();
        let mut r = Reassembler::default();
        r.push(&segs[0].payload, T0).unwrap();
        let mut bad = segs[0].payload.clone();
        bad[SEGMENT_HEADER_LEN + 10] ^= 0xFF;
        assert!(matches!(r.push(&bad, T0), Err(ReassemblyError::CorruptSegment { .. })));

        // overlapping segment at an unaligned offset, consistent bytes
        let h = SegmentHeader {
            re_version: RE_VERSION,
            flags: 0,
            data_source_id: 1,
            byte_offset: 500,
            bundle_total_length: 3000,
            event_number: 1,
        };
        let mut ok = h.encode().to_vec();
        ok.extend_from_slice(&b[500..1500]);
        assert_eq!(r.push(&ok, T0).unwrap(), Progress::Pending);
        let mut wrong = h.encode().to_vec();
        let mut chunk = b[500..1500].to_vec();
        chunk[999] ^= 1;
        wrong.extend_from_slice(&chunk);
        assert!(r.push(&wrong, T0).is_err());

        // length disagreement
        let mut other = SegmentHeader { bundle_total_length: 4000, ..h }.encode().to_vec();
        other.extend_from_slice(&b[500..1500]);
        assert!(r.push(&other, T0).is_err());
        // last flag must match offset + len == total
        let mut lying = SegmentHeader { flags: FLAG_LAST, ..h }.encode().to_vec();
        lying.extend_from_slice(&b[500..1500]);
        assert!(r.push(&lying, T0).is_err());

        let rest = feed(&mut r, &segs[1..]);
        assert_eq!(rest[0].data, b);
    }

    #[test]
    fn expiry_and_eviction() {
        let b = bundle(5000, 5);
        let segs = segment_bundle(&b, 8, 0, 3, 1020).unwrap();
        let mut r = Reassembler::new(ReassemblyConfig {
            timeout: Duration::from_millis(500),
            ..Default::default()
        });
        r.push(&segs[0].payload, T0).unwrap();
        assert!(r.evict_expired(Duration::from_millis(499)).is_empty());
        assert_eq!(r.evict_expired(Duration::from_millis(500)), vec![(3, 8)]);
        assert_eq!(r.buffered_bytes(), 0);
        assert!(matches!(
            r.push(&segs[1].payload, Duration::from_millis(600)),
            Err(ReassemblyError::Expired { .. })
        ));

        let segs = segment_bundle(&b, 9, 0, 3, 1020).unwrap();
        r.push(&segs[0].payload, T0).unwrap();
        assert!(matches!(
            r.push(&segs[1].payload, Duration::from_secs(1)),
            Err(ReassemblyError::Expired { .. })
        ));
        assert_eq!(r.stats().expired, 2);
    }

    #[test]
    fn memory_cap() {
        let mut r = Reassembler::new(ReassemblyConfig {
            max_buffered_bytes: 10_000,
            ..Default::default()
        });
        let a = segment_bundle(&bundle(6000, 6), 1, 0, 1, 1020).unwrap();
        let b = segment_bundle(&bundle(6000, 7), 2, 0, 1, 1020).unwrap();
        r.push(&a[0].payload, T0).unwrap();
        assert_eq!(
            r.push(&b[0].payload, T0),
            Err(ReassemblyError::BufferLimitExceeded {
                requested: 6000,
                cap: 10_000
            })
        );
        assert!(r.buffered_bytes() <= 10_000);
        feed(&mut r, &a[1..]);
        assert_eq!(r.buffered_bytes(), 0);
        assert_eq!(feed(&mut r, &b).len(), 1);
    }

    #[test]
    fn interleaved_sources_and_events() {
        let mut all = Vec::new();
        let mut want = Vec::new();
        for src in 0..3u16 {
            for ev in 0..4u64 {
                let b = bundle(2000 + 100 * ev as usize, u64::from(src) * 10 + ev);
                all.extend(segment_bundle(&b, ev, 0, src, 300).unwrap());
                want.push(((src, ev), b));
            }
        }
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
        let mut r = Reassembler::default();
        let mut got: Vec<_> = feed(&mut r, &all)
            .into_iter()
            .map(|c| ((c.source_id, c.event_number), c.data))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_any_order_with_duplicates(
            len in 0usize..200_000,
            mtu in 21usize..=MAX_MTU_PAYLOAD,
            seed: u64,
        ) {
            let b = bundle(len, seed);
            let segs = segment_bundle(&b, seed, seed as u16, 1, mtu).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order = segs.clone();
            let extra: Vec<_> = segs.iter().filter(|_| rng.gen_bool(0.1)).cloned().collect();
            order.extend(extra);
            order.shuffle(&mut rng);
            let mut r = Reassembler::default();
            let done = feed(&mut r, &order);
            prop_assert_eq!(done.len(), 1);
            prop_assert_eq!(&done[0].data, &b);
            prop_assert_eq!(r.buffered_bytes(), 0);
        }
    }
}
