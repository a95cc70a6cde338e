//! Potential systems for causal time-series analysis.
//!
//! A potential system couples a data-generating process with the
//! counterfactual process obtained by intervening on the assignment. This
//! crate simulates such systems under common random numbers, computes exact
//! dynamic causal effects, and implements regression, kernel, IV, AIPW,
//! randomization and control procedures against those oracles.

pub mod control;
pub mod design;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod linear;
pub mod rng;
pub mod scenarios;
pub mod simulator;
pub mod system;

pub use error::{Error, Result};
