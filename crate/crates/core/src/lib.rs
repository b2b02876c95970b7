//! Interval-based simulator for serverless function orchestration on
//! memory-constrained edge nodes, with probabilistic container caching,
//! LRU and fixed-lifetime baselines, and an exact solver for tiny instances.

pub mod cli;
pub mod costs;
pub mod error;
pub mod model;
pub mod oracle;
pub mod policies;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
