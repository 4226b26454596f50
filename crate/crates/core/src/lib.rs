//! Deep Gaussian process regression with FITC sparse layers, trained by
//! stochastic expectation propagation and moment propagation.

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernel;
pub mod layer;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod oracle;
pub mod sep;
pub mod state;
pub mod trainer;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
