//! Client-driven power balancing for private over-the-air federated learning.
//!
//! Channel statistics, Rényi-DP accounting, the convergence bound, the
//! two-stage (ρ, τ) optimizer and a FedAvg-over-MAC simulator, plus the
//! experiment drivers that write CSV.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod convergence;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod optimizer;
pub mod par;
pub mod rdp;
pub mod rng;
pub mod search;
pub mod task;

pub use error::{Error, Result};
