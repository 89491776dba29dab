use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use ejfat_core::control::MemberSpec;
use ejfat_core::pipeline::InstanceId;
use ejfat_core::protocol::LB_SERVICE_PORT;
use serde::{Deserialize, Serialize};

use crate::DaemonError;

/// One local address the balancer listens on, and the instance it serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenConfig {
    pub addr: IpAddr,
    #[serde(default = "instance_zero")]
    pub instance: InstanceId,
}

fn instance_zero() -> InstanceId {
    InstanceId::ZERO
}

/// Members to install at first start, when no saved state exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(default = "instance_zero")]
    pub instance: InstanceId,
    pub members: Vec<MemberSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonConfig {
    pub listen: Vec<ListenConfig>,
    /// UDP service port. 0 picks a free port (tests).
    pub port: u16,
    pub control_listen: SocketAddr,
    pub workers_per_socket: usize,
    pub counters_flush_interval_ms: u64,
    pub quiesce_ms: u64,
    /// Headroom added to the highest event seen when a plan names no
    /// boundary.
    pub boundary_headroom_events: u64,
    /// Cap on cached per-source-port sending sockets.
    pub send_socket_cache: usize,
    /// Requested SO_RCVBUF for listen sockets. Bursts of jumbo datagrams
    /// overflow the usual default quickly.
    pub recv_buffer_bytes: usize,
    /// Where tables are saved after every change and restored from at start.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_file: Option<PathBuf>,
    pub log_level: String,
    pub instances: Vec<InstanceConfig>,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        DaemonConfig {
            listen: vec![ListenConfig {
                addr: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
                instance: InstanceId::ZERO,
            }],
            port: LB_SERVICE_PORT,
            control_listen: SocketAddr::from(([127, 0, 0, 1], 19580)),
            workers_per_socket: 1,
            counters_flush_interval_ms: 10_000,
            quiesce_ms: 1000,
            boundary_headroom_events: 1000,
            send_socket_cache: 256,
            recv_buffer_bytes: 4 << 20,
            state_file: None,
            log_level: "info".into(),
            instances: Vec::new(),
        }
    }
}

impl DaemonConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, DaemonError> {
        let cfg: DaemonConfig = toml::from_str(s).map_err(|e| DaemonError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DaemonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DaemonError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("daemon config serializes")
    }

    pub fn validate(&self) -> Result<(), DaemonError> {
        let bad = |m: &str| Err(DaemonError::Config(m.into()));
        if self.listen.is_empty() {
            return bad("no listen addresses");
        }
        let mut seen = BTreeSet::new();
        for l in &self.listen {
            if !seen.insert(l.addr) {
                return bad("listen address given twice");
            }
        }
        if self.workers_per_socket == 0 || self.send_socket_cache == 0 {
            return bad("workers_per_socket and send_socket_cache must be positive");
        }
        if self.counters_flush_interval_ms == 0 {
            return bad("counters_flush_interval_ms must be positive");
        }
        if parse_level(&self.log_level).is_none() {
            return bad("log_level must be one of error, warn, info, debug, trace");
        }
        let mut inst = BTreeSet::new();
        for i in &self.instances {
            if !inst.insert(i.instance) {
                return bad("instance configured twice");
            }
            if !self.listen.iter().any(|l| l.instance == i.instance) {
                return bad("instance has members but no listen address");
            }
        }
        Ok(())
    }

    /// Replaces the listen addresses from `IP`, `IP:PORT` or
    /// `IP:PORT@INSTANCE` strings. A port, if given, must agree across
    /// entries and overrides `port`.
    pub fn apply_listen(&mut self, specs: &[String]) -> Result<(), DaemonError> {
        let mut listen = Vec::new();
        let mut port = None;
        for s in specs {
            let (addr, instance) = match s.rsplit_once('@') {
                Some((a, i)) => {
                    let n: u8 = i.parse().map_err(|_| DaemonError::Config(format!("bad instance in {s}")))?;
                    let id = InstanceId::new(n).map_err(|e| DaemonError::Config(e.to_string()))?;
                    (a, id)
                }
                None => (s.as_str(), InstanceId::ZERO),
            };
            let ip = if let Ok(sa) = addr.parse::<SocketAddr>() {
                if port.is_some_and(|p| p != sa.port()) {
                    return Err(DaemonError::Config("listen ports disagree".into()));
                }
                port = Some(sa.port());
                sa.ip()
            } else {
                addr.trim_matches(['[', ']'])
                    .parse::<IpAddr>()
                    .map_err(|_| DaemonError::Config(format!("bad listen address {s}")))?
            };
            listen.push(ListenConfig { addr: ip, instance });
        }
        self.listen = listen;
        if let Some(p) = port {
            self.port = p;
        }
        Ok(())
    }
}

pub fn parse_level(s: &str) -> Option<tracing::Level> {
    s.parse().ok()
}
