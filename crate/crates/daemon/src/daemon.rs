use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ejfat_core::control::ControlPlane;
use ejfat_core::pipeline::{
    CounterSnapshot, L3Entry, PipelineMode, PipelineTables, SnapshotCell,
};
use tokio::sync::oneshot;

use crate::api::{router, ApiState};
use crate::config::DaemonConfig;
use crate::forward::{grow_recv_buffer, run_worker, DataPlane, ForwardingStats, Sender};
use crate::DaemonError;

/// A running balancer: UDP workers, the control API and a janitor that
/// retires quiesced epochs.
pub struct Daemon {
    plane: Arc<DataPlane>,
    api: Arc<ApiState>,
    control_addr: SocketAddr,
    service_addrs: Vec<SocketAddr>,
    workers: Vec<JoinHandle<()>>,
    api_thread: Option<JoinHandle<()>>,
    shutdown: Option<oneshot::Sender<()>>,
}

fn restore_or_new(cfg: &DaemonConfig) -> Result<ControlPlane, DaemonError> {
    if let Some(path) = cfg.state_file.as_ref().filter(|p| p.exists()) {
        let text = std::fs::read_to_string(path)?;
        let tables: PipelineTables = serde_json::from_str(&text)
            .map_err(|e| DaemonError::Config(format!("{}: {e}", path.display())))?;
        tracing::info!("restored tables from {}", path.display());
        return Ok(ControlPlane::restore(tables)?);
    }
    Ok(ControlPlane::new(PipelineMode::Socket))
}

impl Daemon {
    pub fn start(cfg: DaemonConfig) -> Result<Daemon, DaemonError> {
        cfg.validate()?;
        let mut cp = restore_or_new(&cfg)?;
        if cp.tables().mode != PipelineMode::Socket {
            cp.set_mode(PipelineMode::Socket);
        }
        cp.quiesce = Duration::from_millis(cfg.quiesce_ms);

        let mut port = cfg.port;
        let mut sockets = Vec::new();
        for l in &cfg.listen {
            let addr = SocketAddr::new(l.addr, port);
            let sock = UdpSocket::bind(addr).map_err(|source| DaemonError::Bind { addr, source })?;
            let local = sock.local_addr()?;
            let granted = grow_recv_buffer(&sock, cfg.recv_buffer_bytes);
            tracing::debug!("{local}: receive buffer {granted} bytes");
            port = local.port();
            sockets.push((*l, sock, local));
        }
        if cp.tables().service_port != port {
            cp.set_service_port(port);
        }
        for (l, _, _) in &sockets {
            let entry = L3Entry {
                lb_src: l.addr,
                instance: l.instance,
            };
            if cp.tables().l3_lookup(None, l.addr) != Some(entry) {
                cp.install_l3(l.addr, entry);
            }
        }
        for inst in &cfg.instances {
            if cp.tables().instance(inst.instance).is_none() {
                cp.initialize_instance(inst.instance, &inst.members)?;
            }
        }

        let cell = Arc::new(SnapshotCell::new(PipelineTables::clone(cp.tables())));
        cp.attach(cell.clone());
        let plane = Arc::new(DataPlane::new(cell, Sender::new(cfg.send_socket_cache)?));

        let mut workers = Vec::new();
        let mut service_addrs = Vec::new();
        for (_, sock, local) in sockets {
            for w in 0..cfg.workers_per_socket {
                let s = sock.try_clone()?;
                let p = plane.clone();
                workers.push(
                    std::thread::Builder::new()
                        .name(format!("rx-{local}-{w}"))
                        .spawn(move || run_worker(s, p))?,
                );
            }
            service_addrs.push(local);
        }

        let api = Arc::new(ApiState {
            control: Mutex::new(cp),
            plane: plane.clone(),
            started: Instant::now(),
            headroom: cfg.boundary_headroom_events,
            state_file: cfg.state_file.clone(),
        });
        api.persist(api.control.lock().expect("fresh").tables());

        let listener = std::net::TcpListener::bind(cfg.control_listen).map_err(|source| DaemonError::Bind {
            addr: cfg.control_listen,
            source,
        })?;
        listener.set_nonblocking(true)?;
        let control_addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let state = api.clone();
        let flush = Duration::from_millis(cfg.counters_flush_interval_ms);
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let api_thread = std::thread::Builder::new().name("control".into()).spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!("control listener: {e}");
                        return;
                    }
                };
                let janitor_state = state.clone();
                let janitor = tokio::spawn(async move {
                    let mut tick = tokio::time::interval(Duration::from_millis(100));
                    let mut last_flush = Instant::now();
                    loop {
                        tick.tick().await;
                        janitor_state.cleanup_due();
                        if last_flush.elapsed() >= flush {
                            last_flush = Instant::now();
                            let c = janitor_state.plane.counters.snapshot();
                            tracing::info!(
                                packets_in = c.packets_in,
                                packets_out = c.packets_out,
                                discarded = c.total_discards(),
                                "counters"
                            );
                        }
                    }
                });
                let app = router(state);
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                janitor.abort();
                if let Err(e) = served {
                    tracing::error!("control API: {e}");
                }
            });
        })?;

        tracing::info!(
            "forwarding on {:?}, control API on {control_addr}",
            service_addrs
        );
        Ok(Daemon {
            plane,
            api,
            control_addr,
            service_addrs,
            workers,
            api_thread: Some(api_thread),
            shutdown: Some(tx),
        })
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn service_addrs(&self) -> &[SocketAddr] {
        &self.service_addrs
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.plane.counters.snapshot()
    }

    pub fn forwarding_stats(&self) -> ForwardingStats {
        self.plane.stats()
    }

    /// The snapshot the data plane is currently using.
    pub fn tables(&self) -> Arc<PipelineTables> {
        self.plane.cell.load()
    }

    /// Runs `f` with exclusive access to the control plane.
    pub fn with_control<R>(&self, f: impl FnOnce(&mut ControlPlane) -> R) -> R {
        f(&mut self.api.control.lock().expect("control plane poisoned"))
    }

    /// Stops workers and the control API and waits for them.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.plane.stop.store(true, Ordering::Relaxed);
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        if let Some(t) = self.api_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        self.stop();
    }
}
