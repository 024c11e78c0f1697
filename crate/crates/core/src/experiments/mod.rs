//! Configuration-driven sweeps and the acceptance checks.
//!
//! A sweep crosses an `n` grid, a `B` grid and a list of seeds; each
//! `(n, B, seed)` point is independent and runs on the rayon pool, and rows
//! are merged in sorted key order so output is byte-identical across runs
//! and thread counts.

pub mod acceptance;
mod config;
mod sweep;

pub use config::{ExperimentConfig, ExperimentKind};
pub use sweep::{
    generate_datasets, lipschitz_truth, no_harm_slack, point_seed, random_covariance, run_sweep, sweep_points, BFit,
    CellMean, GeneratedDataset, SweepResult, SweepRow, SweepSummary, CORRUPTION_NOISE, EIGEN_RANGE, SCHEMA_VERSION, TRUNCATION,
};
