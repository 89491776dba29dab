//! Data-source and compute-node emulators for exercising a live daemon.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::{IpAddr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::forward::grow_recv_buffer;
use ejfat_core::reassembly::{segment_bundle, Progress, Reassembler, SegmentHeader, MAX_MTU_PAYLOAD};

/// Sends segmented bundles to the balancer from one UDP socket.
pub struct DaqEmulator {
    sock: UdpSocket,
    lb: SocketAddr,
    source_id: u16,
    mtu_payload: usize,
    pace_every: usize,
    pace: Duration,
}

impl DaqEmulator {
    pub fn bind(local: SocketAddr, lb: SocketAddr, source_id: u16) -> io::Result<Self> {
        Ok(DaqEmulator {
            sock: UdpSocket::bind(local)?,
            lb,
            source_id,
            mtu_payload: MAX_MTU_PAYLOAD,
            pace_every: 8,
            pace: Duration::from_micros(200),
        })
    }

    pub fn with_mtu(mut self, mtu_payload: usize) -> Self {
        self.mtu_payload = mtu_payload;
        self
    }

    /// Sleeps for `pause` after every `every` datagrams, so loopback socket
    /// buffers are not overrun.
    pub fn with_pacing(mut self, every: usize, pause: Duration) -> Self {
        self.pace_every = every.max(1);
        self.pace = pause;
        self
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.sock.local_addr()
    }

    /// Returns the number of datagrams sent.
    pub fn send_bundle(&self, event: u64, entropy: u16, bundle: &[u8]) -> io::Result<usize> {
        let segs = segment_bundle(bundle, event, entropy, self.source_id, self.mtu_payload)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        for (i, s) in segs.iter().enumerate() {
            self.sock.send_to(&s.encode(), self.lb)?;
            if (i + 1) % self.pace_every == 0 && !self.pace.is_zero() {
                std::thread::sleep(self.pace);
            }
        }
        Ok(segs.len())
    }

    /// Sends raw bytes, for malformed-traffic tests.
    pub fn send_raw(&self, bytes: &[u8]) -> io::Result<()> {
        self.sock.send_to(bytes, self.lb).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkBundle {
    pub port: u16,
    pub source_id: u16,
    pub event_number: u64,
    pub data: Vec<u8>,
    /// Where the last segment came from.
    pub from: SocketAddr,
}

#[derive(Default)]
struct SinkLog {
    bundles: Vec<SinkBundle>,
    /// Ports on which each event was seen.
    events: BTreeMap<u64, BTreeSet<u16>>,
    errors: u64,
}

/// A compute node: one receiver thread per entropy port, each with its own
/// reassembler.
pub struct CnSink {
    ip: IpAddr,
    base_port: u16,
    ports: usize,
    stop: Arc<AtomicBool>,
    packets: Arc<AtomicU64>,
    log: Arc<Mutex<SinkLog>>,
    threads: Vec<JoinHandle<()>>,
}

impl CnSink {
    /// Binds `2^entropy_bits` consecutive ports starting at `base_port`.
    pub fn start(ip: IpAddr, base_port: u16, entropy_bits: u8) -> io::Result<Self> {
        let n = 1usize << entropy_bits;
        let mut socks = Vec::with_capacity(n);
        for i in 0..n {
            socks.push(UdpSocket::bind(SocketAddr::new(ip, base_port + i as u16))?);
        }
        let stop = Arc::new(AtomicBool::new(false));
        let packets = Arc::new(AtomicU64::new(0));
        let log = Arc::new(Mutex::new(SinkLog::default()));
        let mut threads = Vec::new();
        for sock in socks {
            sock.set_read_timeout(Some(Duration::from_millis(50)))?;
            grow_recv_buffer(&sock, 4 << 20);
            let (stop, packets, log) = (stop.clone(), packets.clone(), log.clone());
            threads.push(std::thread::spawn(move || receive(sock, stop, packets, log)));
        }
        Ok(CnSink {
            ip,
            base_port,
            ports: n,
            stop,
            packets,
            log,
            threads,
        })
    }

    /// Like [`CnSink::start`], picking a free block of ports.
    pub fn start_any(ip: IpAddr, entropy_bits: u8) -> io::Result<Self> {
        let n = 1u32 << entropy_bits;
        let mut base = 20000u32 + (std::process::id() % 1000) * 32;
        while base + n < 65000 {
            if let Ok(s) = Self::start(ip, base as u16, entropy_bits) {
                return Ok(s);
            }
            base += n.max(8) * 3;
        }
        Err(io::Error::new(io::ErrorKind::AddrInUse, "no free port block"))
    }

    pub fn ip(&self) -> IpAddr {
        self.ip
    }

    pub fn base_port(&self) -> u16 {
        self.base_port
    }

    pub fn port_count(&self) -> usize {
        self.ports
    }

    pub fn packets(&self) -> u64 {
        self.packets.load(Ordering::Relaxed)
    }

    pub fn bundles(&self) -> Vec<SinkBundle> {
        self.log.lock().expect("sink log").bundles.clone()
    }

    pub fn bundle_count(&self) -> usize {
        self.log.lock().expect("sink log").bundles.len()
    }

    /// Events of which at least one segment arrived here, with the ports.
    pub fn events(&self) -> BTreeMap<u64, BTreeSet<u16>> {
        self.log.lock().expect("sink log").events.clone()
    }

    pub fn errors(&self) -> u64 {
        self.log.lock().expect("sink log").errors
    }

    pub fn stop(mut self) -> Vec<SinkBundle> {
        self.halt();
        self.bundles()
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for CnSink {
    fn drop(&mut self) {
        self.halt();
    }
}

fn receive(sock: UdpSocket, stop: Arc<AtomicBool>, packets: Arc<AtomicU64>, log: Arc<Mutex<SinkLog>>) {
    let port = sock.local_addr().map(|a| a.port()).unwrap_or(0);
    let started = Instant::now();
    let mut r = Reassembler::default();
    let mut buf = vec![0u8; 65536];
    while !stop.load(Ordering::Relaxed) {
        let (len, from) = match sock.recv_from(&mut buf) {
            Ok(x) => x,
            Err(_) => {
                r.evict_expired(started.elapsed());
                continue;
            }
        };
        packets.fetch_add(1, Ordering::Relaxed);
        let seg = &buf[..len];
        let mut log_entry = log.lock().expect("sink log");
        if let Ok(h) = SegmentHeader::decode(seg) {
            log_entry.events.entry(h.event_number).or_default().insert(port);
        }
        match r.push(seg, started.elapsed()) {
            Ok(Progress::Complete(c)) => log_entry.bundles.push(SinkBundle {
                port,
                source_id: c.source_id,
                event_number: c.event_number,
                data: c.data,
                from,
            }),
            Ok(_) => {}
            Err(_) => log_entry.errors += 1,
        }
    }
}

/// Polls until `done` holds or `timeout` passes.
pub fn wait_until(timeout: Duration, mut done: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if done() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    done()
}
