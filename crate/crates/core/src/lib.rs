//! Discrete-event model of GPU memory expansion over CXL, with speculative
//! reads and deterministic stores at the root ports.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod dstore;
pub mod endpoint;
pub mod engine;
pub mod fabric;
pub mod metrics;
pub mod protocol;
pub mod scenario;
pub mod srqueue;
pub mod traces;
