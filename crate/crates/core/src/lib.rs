//! Scaffolding-set multi-calibration.
//!
//! The pipeline partitions the range of a representation `h: R^d -> R^r`
//! into `B^r` quantile cells ([`scaffold`]), fits the per-cell mean of
//! held-out labels ([`calibrate`]), learns `h` from data by least squares
//! and multi-task SVD ([`represent`]) and measures calibration and accuracy
//! against known ground truth ([`metrics`]). [`datagen`] provides the
//! synthetic truths, and [`experiments`] the sweeps and acceptance checks.

pub mod calibrate;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod represent;
pub mod rng;
pub mod scaffold;

pub use error::{Error, Result};
pub use rng::Seed;
