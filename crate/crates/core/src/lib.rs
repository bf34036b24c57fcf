//! Simulation library for clustered semi-asynchronous federated learning.
//!
//! The crate models a federation of clients with heterogeneous compute and
//! link latencies, trains multinomial logistic regression models under seven
//! aggregation protocols (synchronous, asynchronous, and the clustered
//! semi-asynchronous CSAFL family), and replays everything in deterministic
//! virtual time: the same configuration and seed always produce the same
//! event trace, byte for byte.
//!
//! Module map:
//! - [`data`]: non-IID federated datasets (synthetic generator, power-law
//!   partitioner, text persistence)
//! - [`model`]: multinomial logistic regression, local SGD, FedAvg
//! - [`latency`]: shift-exponential computation latency and dB-domain link
//!   budget communication latency
//! - [`cluster`]: gradient/latency similarity, Gaussian affinity, spectral
//!   clustering into client groups
//! - [`sim`]: the virtual-time protocol engine and experiment driver
//! - [`report`]: per-round metrics, idle-time histograms, CSV emission

pub mod cluster;
pub mod data;
mod error;
pub mod latency;
pub mod model;
pub mod report;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
