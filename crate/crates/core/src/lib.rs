//! Desk-scale laboratory for data poisoning in federated learning: a small
//! MLP stack, datasets and partitioning, a diffusion-based poisoning attack
//! with baselines, per-round and interval detectors, robust aggregators,
//! metrics and a config-driven CLI.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod defenses;
pub mod diffusion;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
