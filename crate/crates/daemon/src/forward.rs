//! Receive workers and the sending side of the data plane.

use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, UdpSocket};
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ejfat_core::pipeline::{
    process_packet, Inbound, PipelineCounters, SlotUsage, SnapshotCell, MAX_INSTANCES,
};
use lru::LruCache;
use serde::{Deserialize, Serialize};

#[derive(Clone)]
enum CachedSocket {
    Bound(Arc<UdpSocket>),
    /// The source port could not be bound; use the shared socket.
    Unavailable,
}

/// Sends forwarded datagrams, preserving the data source's UDP port when
/// the host lets us bind it.
///
/// One socket per (local IP, source port) is kept in an LRU cache. A port
/// that cannot be bound is remembered as unavailable and its traffic goes
/// out through a shared ephemeral socket instead.
pub struct Sender {
    cache: Mutex<LruCache<(IpAddr, u16), CachedSocket>>,
    fallback_v4: UdpSocket,
    fallback_v6: Option<UdpSocket>,
    pub fallbacks: AtomicU64,
    pub send_errors: AtomicU64,
}

impl Sender {
    pub fn new(capacity: usize) -> io::Result<Self> {
        Ok(Sender {
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("nonzero"))),
            fallback_v4: UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?,
            fallback_v6: UdpSocket::bind((Ipv6Addr::UNSPECIFIED, 0)).ok(),
            fallbacks: AtomicU64::new(0),
            send_errors: AtomicU64::new(0),
        })
    }

    fn socket_for(&self, src: SocketAddr) -> CachedSocket {
        let key = (src.ip(), src.port());
        let mut cache = self.cache.lock().expect("sender cache poisoned");
        if let Some(s) = cache.get(&key) {
            return s.clone();
        }
        let entry = match UdpSocket::bind(src) {
            Ok(s) => CachedSocket::Bound(Arc::new(s)),
            Err(_) => CachedSocket::Unavailable,
        };
        cache.put(key, entry.clone());
        entry
    }

    pub fn send(&self, src: SocketAddr, payload: &[u8], dst: SocketAddr) {
        let result = match self.socket_for(src) {
            CachedSocket::Bound(s) => s.send_to(payload, dst),
            CachedSocket::Unavailable => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                match (dst, &self.fallback_v6) {
                    (SocketAddr::V6(_), Some(s)) => s.send_to(payload, dst),
                    _ => self.fallback_v4.send_to(payload, dst),
                }
            }
        };
        if result.is_err() {
            self.send_errors.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn cached_sockets(&self) -> usize {
        self.cache.lock().expect("sender cache poisoned").len()
    }
}

/// Asks for a receive buffer of `bytes`; the kernel may grant less.
/// Returns the size in effect.
pub fn grow_recv_buffer(sock: &UdpSocket, bytes: usize) -> usize {
    let s = socket2::SockRef::from(sock);
    if let Err(e) = s.set_recv_buffer_size(bytes) {
        tracing::warn!("cannot set receive buffer to {bytes}: {e}");
    }
    s.recv_buffer_size().unwrap_or(0)
}

/// State shared by the receive workers and the control side.
pub struct DataPlane {
    pub cell: Arc<SnapshotCell>,
    pub counters: PipelineCounters,
    pub slot_usage: [SlotUsage; MAX_INSTANCES],
    pub sender: Sender,
    max_event: [AtomicU64; MAX_INSTANCES],
    seen: [AtomicBool; MAX_INSTANCES],
    pub stop: AtomicBool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardingStats {
    pub send_errors: u64,
    pub src_port_fallbacks: u64,
    pub send_sockets: usize,
}

impl DataPlane {
    pub fn new(cell: Arc<SnapshotCell>, sender: Sender) -> Self {
        DataPlane {
            cell,
            counters: PipelineCounters::new(),
            slot_usage: Default::default(),
            sender,
            max_event: Default::default(),
            seen: Default::default(),
            stop: AtomicBool::new(false),
        }
    }

    /// Highest event number forwarded for an instance, if any.
    pub fn max_event(&self, instance: usize) -> Option<u64> {
        self.seen[instance]
            .load(Ordering::Acquire)
            .then(|| self.max_event[instance].load(Ordering::Acquire))
    }

    pub fn stats(&self) -> ForwardingStats {
        ForwardingStats {
            send_errors: self.sender.send_errors.load(Ordering::Relaxed),
            src_port_fallbacks: self.sender.fallbacks.load(Ordering::Relaxed),
            send_sockets: self.sender.cached_sockets(),
        }
    }

    /// Handles one received datagram. Never fails: problems are counted.
    pub fn handle(&self, src: SocketAddr, local: SocketAddr, datagram: &[u8]) {
        let tables = self.cell.load_guard();
        let pkt = Inbound {
            link: None,
            src,
            dst: local,
            udp_payload: datagram,
        };
        let out = process_packet(&pkt, &tables);
        self.counters.record(&out);
        if let Ok(f) = out {
            let i = f.instance.index();
            self.max_event[i].fetch_max(f.event_number, Ordering::AcqRel);
            self.seen[i].store(true, Ordering::Release);
            self.slot_usage[i].record(f.event_number);
            self.sender.send(f.src, f.payload, f.dst);
        }
    }
}

/// Receive loop for one worker on one socket; returns when `stop` is set.
pub fn run_worker(sock: UdpSocket, plane: Arc<DataPlane>) {
    let local = match sock.local_addr() {
        Ok(a) => a,
        Err(e) => {
            tracing::error!("worker socket has no local address: {e}");
            return;
        }
    };
    if let Err(e) = sock.set_read_timeout(Some(Duration::from_millis(100))) {
        tracing::warn!("cannot set read timeout on {local}: {e}");
    }
    let mut buf = vec![0u8; 65536];
    while !plane.stop.load(Ordering::Relaxed) {
        match sock.recv_from(&mut buf) {
            Ok((len, src)) => plane.handle(src, local, &buf[..len]),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => tracing::debug!("recv on {local}: {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_source_port_when_free() {
        let sink = UdpSocket::bind("127.0.0.1:0").unwrap();
        sink.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        let probe = UdpSocket::bind("127.0.0.1:0").unwrap();
        let free_port = probe.local_addr().unwrap().port();
        drop(probe);

        let s = Sender::new(4).unwrap();
        let src = SocketAddr::from(([127, 0, 0, 1], free_port));
        s.send(src, b"hi", sink.local_addr().unwrap());
        let mut buf = [0u8; 8];
        let (n, from) = sink.recv_from(&mut buf).unwrap();
        assert_eq!(&buf[..n], b"hi");
        assert_eq!(from, src);
        assert_eq!(s.fallbacks.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn falls_back_when_port_is_taken() {
        let sink = UdpSocket::bind("127.0.0.1:0").unwrap();
        sink.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        let holder = UdpSocket::bind("127.0.0.1:0").unwrap();
        let taken = holder.local_addr().unwrap();

        let s = Sender::new(4).unwrap();
        for _ in 0..3 {
            s.send(taken, b"x", sink.local_addr().unwrap());
        }
        let mut buf = [0u8; 8];
        for _ in 0..3 {
            let (_, from) = sink.recv_from(&mut buf).unwrap();
            assert_ne!(from.port(), taken.port());
        }
        assert_eq!(s.fallbacks.load(Ordering::Relaxed), 3);
        assert_eq!(s.cached_sockets(), 1);
    }

    #[test]
    fn cache_is_bounded() {
        let sink = UdpSocket::bind("127.0.0.1:0").unwrap();
        let s = Sender::new(2).unwrap();
        for _ in 0..5 {
            let p = UdpSocket::bind("127.0.0.1:0").unwrap();
            let a = p.local_addr().unwrap();
            drop(p);
            s.send(a, b"y", sink.local_addr().unwrap());
        }
        assert_eq!(s.cached_sockets(), 2);
    }
}
