//! Node agents of the federated learning platform.
//!
//! - [`ps`]: the parameter server, which runs experiments round by round.
//! - [`client`]: client nodes (participants train, observers only evaluate).
//! - [`cc`]: the control center and its HTTP API ([`http`]).
//! - [`mqtt`]: a [`Transport`](fedplat_core::protocol::Transport) over an
//!   external MQTT broker.
//! - [`federation`]: wires every agent to an embedded broker in one process.
//!
//! Agents only talk through a `Transport`, so the same code runs in-process
//! (tests, simulations, benchmarks) and across machines.

pub mod artifacts;
pub mod cc;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod http;
pub mod link;
pub mod mqtt;
pub mod ps;

pub use error::{Error, Result};
