#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use ejfat_core::control::MemberSpec;
use ejfat_core::pipeline::{InstanceId, MemberId};
use ejfat_daemon::emulator::{CnSink, DaqEmulator};
use ejfat_daemon::{Daemon, DaemonConfig, InstanceConfig, ListenConfig};

pub const LB_IP: Ipv4Addr = Ipv4Addr::new(127, 0, 0, 10);
pub const DAQ_IP: Ipv4Addr = Ipv4Addr::new(127, 0, 0, 1);

pub fn cn_ip(i: u16) -> Ipv4Addr {
    Ipv4Addr::new(127, 0, 0, 2 + i as u8)
}

pub fn config(members: Vec<MemberSpec>, state_file: Option<PathBuf>) -> DaemonConfig {
    DaemonConfig {
        listen: vec![ListenConfig {
            addr: IpAddr::V4(LB_IP),
            instance: InstanceId::ZERO,
        }],
        port: 0,
        control_listen: SocketAddr::from(([127, 0, 0, 1], 0)),
        quiesce_ms: 200,
        boundary_headroom_events: 10,
        state_file,
        instances: if members.is_empty() {
            Vec::new()
        } else {
            vec![InstanceConfig {
                instance: InstanceId::ZERO,
                members,
            }]
        },
        ..DaemonConfig::default()
    }
}

pub fn start_sinks(n: u16, entropy_bits: u8) -> Vec<CnSink> {
    (0..n)
        .map(|i| CnSink::start_any(IpAddr::V4(cn_ip(i)), entropy_bits).expect("sink ports"))
        .collect()
}

/// Member `i + 1` for sink `i`.
pub fn member_for(i: usize, sink: &CnSink, bits: u8) -> MemberSpec {
    let IpAddr::V4(ip) = sink.ip() else { unreachable!() };
    MemberSpec {
        entropy_bits: bits,
        ..MemberSpec::ipv4(MemberId(i as u16 + 1), ip, sink.base_port())
    }
}

pub fn daq(d: &Daemon, source_id: u16) -> DaqEmulator {
    DaqEmulator::bind(SocketAddr::new(IpAddr::V4(DAQ_IP), 0), d.service_addrs()[0], source_id)
        .expect("daq socket")
        .with_pacing(4, Duration::from_micros(250))
}

pub fn url(d: &Daemon, path: &str) -> String {
    format!("http://{}{path}", d.control_addr())
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .expect("http client")
}

/// For each event seen by any sink, the set of sink indices that saw it.
pub fn event_owners(sinks: &[CnSink]) -> BTreeMap<u64, BTreeSet<usize>> {
    let mut owners: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
    for (i, s) in sinks.iter().enumerate() {
        for ev in s.events().keys() {
            owners.entry(*ev).or_default().insert(i);
        }
    }
    owners
}
