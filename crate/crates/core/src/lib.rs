//! Transferred factorisation machines.
//!
//! A browsing-prediction model (CF task) and an ad click model (CTR task)
//! are trained jointly; the CTR model's user and publisher parameters are
//! Gaussian-distributed around their CF counterparts. The crate also carries
//! the comparison regimes, a logistic-regression transfer baseline, metrics,
//! a planted-factor data generator and the `xferfm` command-line driver.

pub mod baseline_lr;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fm;
pub mod synth;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
