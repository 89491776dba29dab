//! Deterministic desk-scale system test.
//!
//! Emulated data sources segment one bundle per event each, a seeded
//! impairment stage delays and reorders the packets, the frame-mode
//! pipeline forwards them while the control plane walks an epoch schedule,
//! and emulated compute nodes reassemble what they receive. Every packet is
//! accounted for on both sides of the balancer.
//!
//! Simulated time advances one tick per packet arriving at the balancer.

mod impair;
mod trace;

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use impair::{impair, DelayDist, Impairment};
pub use trace::{read_trace, write_outputs, Direction, TimelineRow, TraceRecord};

use crate::control::{build_calendar, ControlError, ControlPlane, MemberSpec};
use crate::pipeline::{
    entropy_port, process_packet, slot_of, Calendar, CounterSnapshot, EpochId, Forwarded,
    Inbound, InstanceId, LbIdentity, LinkMeta, MacAddr, MemberId, PipelineCounters,
    PipelineMode, PipelineTables,
};
use crate::protocol::{DiscardReason, LbHeader, LB_SERVICE_PORT};
use crate::reassembly::{segment_bundle, Progress, Reassembler, MAX_MTU_PAYLOAD, SEGMENT_HEADER_LEN};

const LB_MAC: MacAddr = MacAddr([0x02, 0x4c, 0x42, 0x00, 0x00, 0x01]);
const LB_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 100, 10);
const OTHER_MAC: MacAddr = MacAddr([0x02, 0xff, 0xff, 0x00, 0x00, 0x09]);
const OTHER_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 100, 99);
const I0: InstanceId = InstanceId::ZERO;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Control(#[from] ControlError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::ConfigInvalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeDist {
    Fixed { bytes: usize },
    /// Inclusive range.
    Uniform { min: usize, max: usize },
}

impl SizeDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            SizeDist::Fixed { bytes } => bytes,
            SizeDist::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }

    fn min(&self) -> usize {
        match *self {
            SizeDist::Fixed { bytes } => bytes,
            SizeDist::Uniform { min, .. } => min,
        }
    }

    fn max(&self) -> usize {
        match *self {
            SizeDist::Fixed { bytes } => bytes,
            SizeDist::Uniform { max, .. } => max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    #[default]
    Random,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnWeight {
    pub cn: u16,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSpec {
    /// First event number handled by this epoch. The first entry must not
    /// start after the scenario's first event.
    pub start_event: u64,
    pub members: Vec<CnWeight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub udp_base_port: u16,
    pub entropy_bits: u8,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            udp_base_port: 17750,
            entropy_bits: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlTiming {
    /// Activate an epoch once the balancer has seen an event within this
    /// many events of its start. Derived from the reorder window if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation_lead_events: Option<u64>,
    /// Packets processed between consecutive activation stages.
    pub stage_gap_packets: usize,
    /// Packets between the first arrival past a boundary and removal of the
    /// old epoch. Defaults to twice the reorder window plus one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quiesce_packets: Option<usize>,
}

impl Default for ControlTiming {
    fn default() -> Self {
        ControlTiming {
            activation_lead_events: None,
            stage_gap_packets: 1,
            quiesce_packets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub daq_count: u16,
    pub cn_count: u16,
    #[serde(default)]
    pub first_event: u64,
    pub event_count: u64,
    pub bundle_size: SizeDist,
    #[serde(default = "default_mtu")]
    pub mtu_payload: usize,
    #[serde(default)]
    pub entropy: EntropyMode,
    #[serde(default)]
    pub impairment: Impairment,
    /// Probability of injecting a malformed or misaddressed packet after
    /// each data packet. These are the only packets the balancer should
    /// discard.
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub nodes: NodeConfig,
    #[serde(default)]
    pub control: ControlTiming,
    #[serde(default = "default_tick")]
    pub tick_ns: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_bucket")]
    pub timeline_bucket_packets: u64,
    pub epochs: Vec<EpochSpec>,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_mtu() -> usize {
    1024
}
fn default_tick() -> u64 {
    100
}
fn default_workers() -> usize {
    1
}
fn default_bucket() -> u64 {
    1000
}

impl ScenarioConfig {
    /// Five sources and ten nodes over three epochs: node 0 alone, then
    /// nodes 4, 5 and 6, then all ten with node 5 at double weight. The
    /// reorder window is 2000 packets and a run is a little over 10^5
    /// packets.
    pub fn three_epoch_reference(seed: u64) -> Self {
        let all = (0..10)
            .map(|cn| CnWeight {
                cn,
                weight: if cn == 5 { 2.0 } else { 1.0 },
            })
            .collect();
        ScenarioConfig {
            name: "three-epoch".into(),
            seed,
            daq_count: 5,
            cn_count: 10,
            first_event: 0,
            event_count: 7000,
            bundle_size: SizeDist::Uniform { min: 1500, max: 4000 },
            mtu_payload: 1024,
            entropy: EntropyMode::Random,
            impairment: Impairment {
                reorder_window: 2000,
                delay: DelayDist::Uniform,
                loss_rate: 0.0,
            },
            noise_rate: 0.0,
            nodes: NodeConfig::default(),
            control: ControlTiming::default(),
            tick_ns: default_tick(),
            workers: 1,
            timeline_bucket_packets: default_bucket(),
            epochs: vec![
                EpochSpec {
                    start_event: 0,
                    members: vec![CnWeight { cn: 0, weight: 1.0 }],
                },
                EpochSpec {
                    start_event: 2500,
                    members: [4, 5, 6].map(|cn| CnWeight { cn, weight: 1.0 }).to_vec(),
                },
                EpochSpec {
                    start_event: 5000,
                    members: all,
                },
            ],
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.daq_count == 0 || self.cn_count == 0 {
            return invalid("daq_count and cn_count must be positive");
        }
        if self.event_count == 0 || self.first_event.checked_add(self.event_count).is_none() {
            return invalid("event range is empty or overflows");
        }
        if self.bundle_size.min() > self.bundle_size.max() {
            return invalid("bundle_size min exceeds max");
        }
        if self.bundle_size.max() > u32::MAX as usize {
            return invalid("bundle_size exceeds the 32-bit length field");
        }
        if self.mtu_payload <= SEGMENT_HEADER_LEN || self.mtu_payload > MAX_MTU_PAYLOAD {
            return invalid(format!(
                "mtu_payload must be in ({SEGMENT_HEADER_LEN}, {MAX_MTU_PAYLOAD}]"
            ));
        }
        let imp = &self.impairment;
        if !(0.0..1.0).contains(&imp.loss_rate) || !(0.0..1.0).contains(&self.noise_rate) {
            return invalid("loss_rate and noise_rate must be in [0, 1)");
        }
        if let DelayDist::Exponential { mean } = imp.delay {
            if !(mean.is_finite() && mean >= 0.0) {
                return invalid("exponential delay mean must be finite and non-negative");
            }
        }
        let n = self.nodes;
        if n.entropy_bits > 16 || u32::from(n.udp_base_port) + (1u32 << n.entropy_bits) - 1 > 0xFFFF {
            return invalid("node port range exceeds 65535");
        }
        if self.tick_ns == 0 || self.workers == 0 || self.timeline_bucket_packets == 0 {
            return invalid("tick_ns, workers and timeline_bucket_packets must be positive");
        }
        let Some(first) = self.epochs.first() else {
            return invalid("epoch schedule is empty");
        };
        if first.start_event > self.first_event {
            return invalid("first epoch starts after the first event");
        }
        for (i, pair) in self.epochs.windows(2).enumerate() {
            if pair[1].start_event <= pair[0].start_event {
                return invalid(format!("epoch {} does not start after epoch {}", i + 1, i));
            }
        }
        for (i, e) in self.epochs.iter().enumerate() {
            if e.members.is_empty() {
                return invalid(format!("epoch {i} has no members"));
            }
            let mut seen = std::collections::BTreeSet::new();
            for m in &e.members {
                if m.cn >= self.cn_count {
                    return invalid(format!("epoch {i} names node {} of {}", m.cn, self.cn_count));
                }
                if !seen.insert(m.cn) {
                    return invalid(format!("epoch {i} lists node {} twice", m.cn));
                }
                if !(m.weight.is_finite() && m.weight > 0.0) {
                    return invalid(format!("epoch {i} node {} has weight {}", m.cn, m.weight));
                }
            }
        }
        Ok(())
    }

    fn min_packets_per_event(&self) -> u64 {
        let chunk = self.mtu_payload - SEGMENT_HEADER_LEN;
        let per_bundle = self.bundle_size.min().div_ceil(chunk).max(1);
        u64::from(self.daq_count) * per_bundle as u64
    }

    fn stage_span(&self) -> usize {
        3 * self.control.stage_gap_packets
    }

    /// Events of headroom needed so that, with every packet displaced by at
    /// most the reorder window, all activation stages are published before
    /// the first packet past the boundary arrives.
    pub fn effective_lead_events(&self) -> u64 {
        self.control.activation_lead_events.unwrap_or_else(|| {
            let w = self.impairment.reorder_window as u64;
            (2 * w + self.stage_span() as u64 + 2).div_ceil(self.min_packets_per_event())
        })
    }

    pub fn effective_quiesce_packets(&self) -> usize {
        self.control
            .quiesce_packets
            .unwrap_or(2 * self.impairment.reorder_window + 1)
    }
}

pub fn daq_addr(daq: u16) -> SocketAddr {
    let ip = Ipv4Addr::new(10, 1, (daq / 250) as u8, (daq % 250) as u8 + 1);
    SocketAddr::new(IpAddr::V4(ip), 40000 + daq)
}

pub fn cn_ip(cn: u16) -> Ipv4Addr {
    Ipv4Addr::new(10, 2, (cn / 250) as u8, (cn % 250) as u8 + 1)
}

fn cn_mac(cn: u16) -> MacAddr {
    let [hi, lo] = cn.to_be_bytes();
    MacAddr([0x02, 0, 0, 0x02, hi, lo])
}

fn lb_addr() -> SocketAddr {
    SocketAddr::new(IpAddr::V4(LB_IP), LB_SERVICE_PORT)
}

fn member_spec(cfg: &ScenarioConfig, m: &CnWeight) -> MemberSpec {
    MemberSpec {
        member: MemberId(m.cn),
        ipv4: Some(cn_ip(m.cn)),
        ipv6: None,
        next_hop_mac: cn_mac(m.cn),
        udp_base_port: cfg.nodes.udp_base_port,
        entropy_bits: cfg.nodes.entropy_bits,
        weight: m.weight,
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic bundle contents for one (source, event).
pub fn bundle_content(seed: u64, daq: u16, event: u64, len: usize) -> Vec<u8> {
    let mut state = splitmix(seed ^ splitmix(event ^ (u64::from(daq) << 48)));
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        state = splitmix(state);
        out.extend_from_slice(&state.to_le_bytes());
    }
    out.truncate(len);
    out
}

#[derive(Debug, Clone)]
struct SimPacket {
    daq: u16,
    orig: usize,
    /// For injected junk: the discard reason the balancer should report.
    noise: Option<DiscardReason>,
    event: u64,
    entropy: u16,
    dst: SocketAddr,
    dst_mac: MacAddr,
    bytes: Vec<u8>,
}

impl SimPacket {
    fn inbound(&self) -> Inbound<'_> {
        Inbound {
            link: Some(LinkMeta {
                input_port: self.daq,
                dst_mac: self.dst_mac,
            }),
            src: daq_addr(self.daq),
            dst: self.dst,
            udp_payload: &self.bytes,
        }
    }
}

fn noise_packet(rng: &mut ChaCha8Rng, daq: u16, event: u64, entropy: u16) -> SimPacket {
    let mut bytes = LbHeader::new(event, entropy).encode().to_vec();
    bytes.extend_from_slice(&[0u8; 32]);
    let mut p = SimPacket {
        daq,
        orig: 0,
        noise: None,
        event,
        entropy,
        dst: lb_addr(),
        dst_mac: LB_MAC,
        bytes,
    };
    let reason = match rng.gen_range(0..6) {
        0 => {
            p.dst_mac = OTHER_MAC;
            DiscardReason::L2Reject
        }
        1 => {
            p.dst = SocketAddr::new(IpAddr::V4(OTHER_IP), LB_SERVICE_PORT);
            DiscardReason::L3Reject
        }
        2 => {
            p.dst = SocketAddr::new(IpAddr::V4(LB_IP), LB_SERVICE_PORT + 1);
            DiscardReason::NotLbPort
        }
        3 => {
            p.bytes[0] = b'X';
            DiscardReason::BadMagic
        }
        4 => {
            p.bytes[2] = 0xEE;
            DiscardReason::BadVersion
        }
        _ => {
            p.bytes.truncate(rng.gen_range(0..16));
            DiscardReason::Truncated
        }
    };
    p.noise = Some(reason);
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub index: usize,
    pub epoch: Option<EpochId>,
    pub start_event: u64,
    pub members: Vec<CnWeight>,
    /// Calendar slots per node.
    pub slot_counts: BTreeMap<u16, usize>,
    /// Events whose first packet reached each node under this epoch.
    pub events_per_cn: BTreeMap<u16, u64>,
    pub packets_per_cn: BTreeMap<u16, u64>,
    pub activated_at_ns: Option<u64>,
    pub switched_at_ns: Option<u64>,
    pub first_arrival_ns: Option<u64>,
    pub cleaned_up_at_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortCount {
    pub cn: u16,
    pub port: u16,
    pub packets: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub daq_count: u16,
    pub cn_count: u16,
    pub events: u64,
    pub bundles: u64,
    pub data_packets: u64,
    pub noise_packets: u64,
    pub impairment_dropped: u64,
    pub max_displacement: u64,
    pub activation_lead_events: u64,
    pub quiesce_packets: u64,
    pub counters: CounterSnapshot,
    pub conserved: bool,
    /// Discards of injected junk with the expected reason.
    pub deliberate_discards: u64,
    /// Any other discard, or junk forwarded or discarded for another reason.
    pub unexpected_outcomes: u64,
    /// Events whose packets reached more than one node.
    pub split_events: u64,
    /// Forwarded packets that differ from the independently computed
    /// destination, epoch or source.
    pub misdirected_packets: u64,
    /// Activations whose last stage was published after a packet past the
    /// boundary had already arrived.
    pub late_activations: u64,
    pub bundles_completed: u64,
    pub bundles_corrupt: u64,
    pub bundles_lost: u64,
    /// Bundles whose segments reached more than one (node, port).
    pub bundles_split_across_ports: u64,
    pub reassembly_errors: u64,
    pub publications: u64,
    pub epochs: Vec<EpochReport>,
    pub per_port: Vec<PortCount>,
    /// Hash of the event-to-node assignment, in event order.
    pub assignment_digest: u64,
}

impl ScenarioReport {
    /// Packets in equal packets out plus deliberate discards, with nothing
    /// else discarded.
    pub fn hitless(&self) -> bool {
        self.conserved
            && self.counters.packets_in == self.counters.packets_out + self.deliberate_discards
            && self.unexpected_outcomes == 0
            && self.counters.discarded(DiscardReason::NoEpoch) == 0
            && self.counters.discarded(DiscardReason::EmptySlot) == 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep per-packet in/out traces.
    pub traces: bool,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub trace_in: Vec<TraceRecord>,
    pub trace_out: Vec<TraceRecord>,
    pub timeline: Vec<TimelineRow>,
    /// Node that received each event, indexed from the first event.
    pub assignments: Vec<Option<u16>>,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, SimError> {
    Ok(run_scenario_with(cfg, RunOptions::default())?.report)
}

/// Runs the scenario and writes the report and traces into `out`.
pub fn run_scenario_to_dir(cfg: &ScenarioConfig, out: &Path) -> Result<ScenarioReport, SimError> {
    let run = run_scenario_with(cfg, RunOptions { traces: true })?;
    write_outputs(&run, out).map_err(|e| SimError::ConfigInvalid(format!("{}: {e}", out.display())))?;
    Ok(run.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Cleanup(usize),
    Activate(usize),
}

struct Accounting<'c> {
    cfg: &'c ScenarioConfig,
    opts: RunOptions,
    counters: PipelineCounters,
    cn_by_ip: HashMap<IpAddr, u16>,
    /// Ground truth: epoch index per event range, for activated epochs.
    truth_starts: Vec<u64>,
    truth_calendars: Vec<Calendar>,
    epoch_index: HashMap<EpochId, usize>,
    sizes: Vec<u32>,
    first_cn: Vec<Option<u16>>,
    split: Vec<bool>,
    bundle_port: HashMap<(u16, u64), (u16, u16, bool)>,
    reassemblers: HashMap<(u16, u16), Reassembler>,
    ports: BTreeMap<(u16, u16), u64>,
    report: ScenarioReport,
    timeline: BTreeMap<(u64, u16, u16, u32), u64>,
    trace_in: Vec<TraceRecord>,
    trace_out: Vec<TraceRecord>,
}

impl Accounting<'_> {
    fn now(&self, pos: usize) -> Duration {
        Duration::from_nanos(pos as u64 * self.cfg.tick_ns)
    }

    fn expected_epoch(&self, event: u64) -> usize {
        self.truth_starts.partition_point(|s| *s <= event) - 1
    }

    fn consume(&mut self, pos: usize, pkt: &SimPacket, outcome: Result<Forwarded<'_>, DiscardReason>) {
        self.counters.record(&outcome);
        let ts = pos as u64 * self.cfg.tick_ns;
        let header_ok = pkt.noise.is_none();
        if self.opts.traces {
            let parsed = !matches!(
                pkt.noise,
                Some(DiscardReason::BadMagic | DiscardReason::Truncated)
            );
            self.trace_in.push(TraceRecord {
                direction: Direction::In,
                timestamp_ns: ts,
                event_number: parsed.then_some(pkt.event),
                entropy: parsed.then_some(pkt.entropy),
                src: daq_addr(pkt.daq),
                dst: pkt.dst,
                size: pkt.bytes.len(),
            });
        }
        let f = match outcome {
            Err(reason) => {
                if pkt.noise == Some(reason) {
                    self.report.deliberate_discards += 1;
                } else {
                    self.report.unexpected_outcomes += 1;
                }
                return;
            }
            Ok(_) if !header_ok => {
                self.report.unexpected_outcomes += 1;
                return;
            }
            Ok(f) => f,
        };
        if self.opts.traces {
            self.trace_out.push(TraceRecord {
                direction: Direction::Out,
                timestamp_ns: ts,
                event_number: Some(f.event_number),
                entropy: Some(f.entropy),
                src: f.src,
                dst: f.dst,
                size: f.payload.len(),
            });
        }

        let k = self.expected_epoch(f.event_number);
        let slot_member = self.truth_calendars[k].slot(slot_of(f.event_number));
        let expected_dst = slot_member.map(|m| {
            let port = entropy_port(self.cfg.nodes.udp_base_port, self.cfg.nodes.entropy_bits, f.entropy);
            SocketAddr::new(IpAddr::V4(cn_ip(m.0)), port)
        });
        let expected_src = SocketAddr::new(IpAddr::V4(LB_IP), daq_addr(pkt.daq).port());
        if self.epoch_index.get(&f.epoch) != Some(&k) || Some(f.dst) != expected_dst || f.src != expected_src {
            self.report.misdirected_packets += 1;
        }
        let Some(&cn) = self.cn_by_ip.get(&f.dst.ip()) else {
            self.report.misdirected_packets += 1;
            return;
        };
        let ek = self.epoch_index.get(&f.epoch).copied().unwrap_or(k);
        let port = f.dst.port();

        let i = (f.event_number - self.cfg.first_event) as usize;
        match self.first_cn[i] {
            None => {
                self.first_cn[i] = Some(cn);
                *self.report.epochs[ek].events_per_cn.entry(cn).or_default() += 1;
            }
            Some(prev) if prev != cn && !self.split[i] => {
                self.split[i] = true;
                self.report.split_events += 1;
            }
            _ => {}
        }
        *self.report.epochs[ek].packets_per_cn.entry(cn).or_default() += 1;
        *self.ports.entry((cn, port)).or_default() += 1;
        let bucket = pos as u64 / self.cfg.timeline_bucket_packets * self.cfg.timeline_bucket_packets * self.cfg.tick_ns;
        *self.timeline.entry((bucket, pkt.daq, cn, f.epoch.0)).or_default() += 1;

        let key = (pkt.daq, f.event_number);
        let seen = self.bundle_port.entry(key).or_insert((cn, port, false));
        if (seen.0, seen.1) != (cn, port) && !seen.2 {
            seen.2 = true;
            self.report.bundles_split_across_ports += 1;
        }

        let now = self.now(pos);
        let r = self.reassemblers.entry((cn, port)).or_default();
        match r.push(f.payload, now) {
            Ok(Progress::Complete(c)) => {
                let idx = i * self.cfg.daq_count as usize + c.source_id as usize;
                let want_len = self.sizes.get(idx).copied().unwrap_or(u32::MAX) as usize;
                let ok = c.event_number == f.event_number
                    && c.data.len() == want_len
                    && c.data == bundle_content(self.cfg.seed, c.source_id, c.event_number, want_len);
                if ok {
                    self.report.bundles_completed += 1;
                } else {
                    self.report.bundles_corrupt += 1;
                }
            }
            Ok(_) => {}
            Err(_) => self.report.reassembly_errors += 1,
        }
    }
}

fn forward_span<'a>(
    pkts: &'a [SimPacket],
    tables: &PipelineTables,
    workers: usize,
) -> Vec<Result<Forwarded<'a>, DiscardReason>> {
    let run = |chunk: &'a [SimPacket]| -> Vec<_> {
        chunk.iter().map(|p| process_packet(&p.inbound(), tables)).collect()
    };
    if workers <= 1 || pkts.len() < 4096 {
        return run(pkts);
    }
    let size = pkts.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = pkts.chunks(size).map(|c| s.spawn(move || run(c))).collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn fnv(hash: &mut u64, bytes: &[u8]) {
    for b in bytes {
        *hash ^= u64::from(*b);
        *hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
}

pub fn run_scenario_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<ScenarioRun, SimError> {
    cfg.validate()?;
    let daqs = cfg.daq_count as usize;
    let events = cfg.event_count as usize;

    // ---- sources ---------------------------------------------------------
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sizes = Vec::with_capacity(events * daqs);
    let mut seq = vec![0u16; daqs];
    let mut sent = Vec::new();
    let mut noise = 0u64;
    for e in cfg.first_event..cfg.first_event + cfg.event_count {
        for d in 0..cfg.daq_count {
            let len = cfg.bundle_size.sample(&mut rng);
            sizes.push(len as u32);
            let entropy = match cfg.entropy {
                EntropyMode::Random => rng.gen(),
                EntropyMode::Sequential => {
                    let v = seq[d as usize];
                    seq[d as usize] = v.wrapping_add(1);
                    v
                }
            };
            let bundle = bundle_content(cfg.seed, d, e, len);
            let segs = segment_bundle(&bundle, e, entropy, d, cfg.mtu_payload)
                .map_err(|err| SimError::ConfigInvalid(err.to_string()))?;
            for s in segs {
                sent.push(SimPacket {
                    daq: d,
                    orig: 0,
                    noise: None,
                    event: e,
                    entropy,
                    dst: lb_addr(),
                    dst_mac: LB_MAC,
                    bytes: s.encode(),
                });
                if cfg.noise_rate > 0.0 && rng.gen_bool(cfg.noise_rate) {
                    let from = rng.gen_range(0..cfg.daq_count);
                    let entropy = rng.gen();
                    sent.push(noise_packet(&mut rng, from, e, entropy));
                    noise += 1;
                }
            }
        }
    }
    for (i, p) in sent.iter_mut().enumerate() {
        p.orig = i;
    }
    let generated = sent.len();
    let data_packets = generated as u64 - noise;

    // ---- network -----------------------------------------------------------
    let arrivals = impair(sent, &cfg.impairment, splitmix(cfg.seed ^ 0x494d_5041_4952));
    let n = arrivals.len();
    let mut survivors: Vec<usize> = arrivals.iter().map(|p| p.orig).collect();
    survivors.sort_unstable();
    let max_displacement = arrivals
        .iter()
        .enumerate()
        .map(|(pos, p)| pos.abs_diff(survivors.binary_search(&p.orig).expect("present")) as u64)
        .max()
        .unwrap_or(0);

    // ---- control schedule ----------------------------------------------------
    // Highest event seen by the balancer after each arrival.
    let mut prefix_max = Vec::with_capacity(n);
    let mut hi: Option<u64> = None;
    for p in &arrivals {
        if p.noise.is_none() {
            hi = Some(hi.map_or(p.event, |h| h.max(p.event)));
        }
        prefix_max.push(hi);
    }
    let first_reaching = |t: u64| -> Option<usize> {
        let i = prefix_max.partition_point(|m| m.is_none_or(|m| m < t));
        (i < n).then_some(i)
    };

    let lead = cfg.effective_lead_events();
    let quiesce = cfg.effective_quiesce_packets();
    let gap = cfg.control.stage_gap_packets;
    let span = cfg.stage_span();
    let mut actions: Vec<(usize, Action)> = Vec::new();
    let mut activated = 1usize;
    let mut late = 0u64;
    let mut busy_until = 0usize;
    let mut first_arrivals = vec![None; cfg.epochs.len()];
    for (k, spec) in cfg.epochs.iter().enumerate().skip(1) {
        let Some(trigger) = first_reaching(spec.start_event.saturating_sub(lead)) else {
            break;
        };
        let at = (trigger + 1).max(busy_until);
        if at >= n {
            break;
        }
        busy_until = at + span;
        actions.push((at, Action::Activate(k)));
        activated = k + 1;
        let arrival = first_reaching(spec.start_event);
        first_arrivals[k] = arrival;
        if let Some(a) = arrival {
            if a < busy_until {
                late += 1;
            }
            actions.push(((a.max(at) + quiesce).max(busy_until), Action::Cleanup(k - 1)));
        }
    }
    actions.sort();
    let mut busy_until = 0;
    for (at, act) in actions.iter_mut() {
        *at = (*at).max(busy_until).min(n);
        if let Action::Activate(_) = act {
            busy_until = *at + span;
        }
    }
    actions.sort_by_key(|(at, _)| *at);

    // ---- ground truth --------------------------------------------------------
    let truth_calendars = cfg.epochs[..activated]
        .iter()
        .map(|e| {
            let w: Vec<_> = e.members.iter().map(|m| (MemberId(m.cn), m.weight)).collect();
            build_calendar(&w)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let epochs = cfg
        .epochs
        .iter()
        .enumerate()
        .map(|(k, e)| EpochReport {
            index: k,
            epoch: (k < activated).then_some(EpochId(k as u32 + 1)),
            start_event: e.start_event,
            members: e.members.clone(),
            slot_counts: truth_calendars
                .get(k)
                .map(|c| c.members().into_iter().map(|m| (m.0, c.count(m))).collect())
                .unwrap_or_default(),
            events_per_cn: BTreeMap::new(),
            packets_per_cn: BTreeMap::new(),
            activated_at_ns: None,
            switched_at_ns: None,
            first_arrival_ns: first_arrivals[k].map(|a| a as u64 * cfg.tick_ns),
            cleaned_up_at_ns: None,
        })
        .collect();

    let mut acct = Accounting {
        cfg,
        opts,
        counters: PipelineCounters::new(),
        cn_by_ip: (0..cfg.cn_count).map(|c| (IpAddr::V4(cn_ip(c)), c)).collect(),
        truth_starts: cfg.epochs[..activated].iter().map(|e| e.start_event).collect(),
        truth_calendars,
        epoch_index: (0..activated).map(|k| (EpochId(k as u32 + 1), k)).collect(),
        sizes,
        first_cn: vec![None; events],
        split: vec![false; events],
        bundle_port: HashMap::new(),
        reassemblers: HashMap::new(),
        ports: BTreeMap::new(),
        report: ScenarioReport {
            name: cfg.name.clone(),
            seed: cfg.seed,
            daq_count: cfg.daq_count,
            cn_count: cfg.cn_count,
            events: cfg.event_count,
            bundles: cfg.event_count * u64::from(cfg.daq_count),
            data_packets,
            noise_packets: noise,
            impairment_dropped: (generated - n) as u64,
            max_displacement,
            activation_lead_events: lead,
            quiesce_packets: quiesce as u64,
            counters: CounterSnapshot::default(),
            conserved: false,
            deliberate_discards: 0,
            unexpected_outcomes: 0,
            split_events: 0,
            misdirected_packets: 0,
            late_activations: late,
            bundles_completed: 0,
            bundles_corrupt: 0,
            bundles_lost: 0,
            bundles_split_across_ports: 0,
            reassembly_errors: 0,
            publications: 0,
            epochs,
            per_port: Vec::new(),
            assignment_digest: 0,
        },
        timeline: BTreeMap::new(),
        trace_in: Vec::new(),
        trace_out: Vec::new(),
    };

    // ---- balancer ------------------------------------------------------------
    let mut cp = ControlPlane::new(PipelineMode::Frame);
    cp.quiesce = Duration::from_nanos(quiesce as u64 * cfg.tick_ns);
    cp.install_identity(
        I0,
        &LbIdentity {
            mac: LB_MAC,
            ipv4: Some(LB_IP),
            ipv6: None,
        },
    );
    let initial: Vec<MemberSpec> = cfg.epochs[0].members.iter().map(|m| member_spec(cfg, m)).collect();
    cp.initialize_instance(I0, &initial)?;

    let workers = cfg.workers;
    let mut pos = 0usize;
    let process = |from: &mut usize, to: usize, tables: &PipelineTables, acct: &mut Accounting| {
        let to = to.min(n);
        if *from >= to {
            return;
        }
        let out = forward_span(&arrivals[*from..to], tables, workers);
        for (i, outcome) in out.into_iter().enumerate() {
            acct.consume(*from + i, &arrivals[*from + i], outcome);
        }
        *from = to;
    };

    for (at, action) in actions {
        let tables = cp.tables().clone();
        process(&mut pos, at, &tables, &mut acct);
        let now = acct.now(pos);
        match action {
            Action::Activate(k) => {
                let members = cfg.epochs[k].members.iter().map(|m| member_spec(cfg, m)).collect();
                let plan = cp.plan_epoch(I0, cfg.epochs[k].start_event, members)?;
                debug_assert_eq!(Some(plan.epoch), acct.report.epochs[k].epoch);
                acct.report.epochs[k].activated_at_ns = Some(now.as_nanos() as u64);
                let start = pos;
                cp.activate_with(&plan, now, |stage, tables| {
                    if stage < 3 {
                        process(&mut pos, start + (stage + 1) * gap, tables, &mut acct);
                    }
                })?;
                acct.report.epochs[k].switched_at_ns = Some(pos as u64 * cfg.tick_ns);
            }
            Action::Cleanup(k) => {
                let epoch = acct.report.epochs[k].epoch.expect("activated");
                cp.cleanup(I0, epoch, now)?;
                acct.report.epochs[k].cleaned_up_at_ns = Some(now.as_nanos() as u64);
            }
        }
    }
    let tables = cp.tables().clone();
    process(&mut pos, n, &tables, &mut acct);

    // ---- close out -----------------------------------------------------------
    let mut report = acct.report;
    report.counters = acct.counters.snapshot();
    report.conserved = report.counters.is_conserved();
    report.publications = cp.publications();
    report.bundles_lost = report.bundles - report.bundles_completed - report.bundles_corrupt;
    report.per_port = acct
        .ports
        .iter()
        .map(|(&(cn, port), &packets)| PortCount { cn, port, packets })
        .collect();
    let mut digest = 0xcbf2_9ce4_8422_2325u64;
    for (i, cn) in acct.first_cn.iter().enumerate() {
        fnv(&mut digest, &(i as u64).to_le_bytes());
        fnv(&mut digest, &cn.map_or(u32::MAX, u32::from).to_le_bytes());
    }
    report.assignment_digest = digest;

    Ok(ScenarioRun {
        report,
        trace_in: acct.trace_in,
        trace_out: acct.trace_out,
        timeline: acct
            .timeline
            .into_iter()
            .map(|((bucket_start_ns, daq, cn, epoch), packets)| TimelineRow {
                bucket_start_ns,
                daq,
                cn,
                epoch,
                packets,
            })
            .collect(),
        assignments: acct.first_cn,
    })
}
