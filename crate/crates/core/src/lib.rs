//! Emulated edge/cloud FaaS benchmark: WAN scenarios, a discrete-event
//! cluster model, closed-loop workloads and latency statistics.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod error;
pub mod metrics;
pub mod netmodel;
pub mod scenario;
pub mod workload;

pub use error::{Error, Result};
