//! Userspace deployment of the event-aware load balancer.
//!
//! The daemon listens on the LB service port, runs every datagram through
//! the socket-mode pipeline against the current table snapshot and re-sends
//! it to the chosen compute node. Table changes arrive through an HTTP
//! control API and are published atomically; receive workers never wait on
//! them.

pub mod api;
pub mod config;
mod daemon;
pub mod emulator;
pub mod forward;

use std::net::SocketAddr;

use ejfat_core::control::ControlError;
use thiserror::Error;

pub use config::{DaemonConfig, InstanceConfig, ListenConfig};
pub use daemon::Daemon;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
