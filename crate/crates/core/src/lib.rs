//! Event-aware UDP load balancing.
//!
//! Packets from data-acquisition sources carry a 16-octet header with an
//! event number. The pipeline maps each event number to an epoch, then to a
//! calendar slot, then to a compute node, so every datagram of one event
//! lands on the same node. The control plane changes the mapping by
//! activating new epochs at future event numbers.

pub mod control;
pub mod pipeline;
pub mod protocol;
pub mod reassembly;
pub mod sim;
