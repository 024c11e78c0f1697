//! Sample splitting, the per-cell mean predictor and post-processing.

mod groups;
mod patcher;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, MlpSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, Seed};
use crate::scaffold::{build_partition, QuantileMode, ReprFn, ScaffoldPartition};

pub use groups::{Group, GroupCollection};
pub use patcher::{bucket_of, iterative_multicalibrate, num_buckets, Adjustment, PatchConfig, PatchOutcome, PatchedPredictor};

pub const DEFAULT_PI: f64 = 0.5;

pub const PREDICTOR_VERSION: u32 = 1;

/// A probability predictor on `R^d`.
pub trait Predictor: Sync {
    /// # Panics
    /// Implementations may panic if `x` has the wrong length.
    fn predict(&self, x: &[f64]) -> f64;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, x: &[f64]) -> f64 {
        (**self).predict(x)
    }
}

impl<P: Predictor + ?Sized + Send> Predictor for Box<P> {
    fn predict(&self, x: &[f64]) -> f64 {
        (**self).predict(x)
    }
}

impl Predictor for MlpSpec {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x).expect("input dimension matches spec")
    }
}

/// Wraps a closure as a predictor.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Predictor for FnPredictor<F> {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Predictor that is constant.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, _: &[f64]) -> f64 {
        self.0
    }
}

/// Shuffled index split with `|D1| = floor(pi m)`. Both index lists are
/// returned in increasing order.
pub fn split_indices(m: usize, pi: f64, seed: Seed) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::param("pi", format!("must lie in (0, 1), got {pi}")));
    }
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    let m1 = (pi * m as f64).floor() as usize;
    if m1 == 0 || m1 == m {
        return Err(Error::param("pi", format!("split of {m} rows at pi = {pi} leaves a side empty")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut seed.derive(stream::SPLIT).rng());
    let mut d1 = idx[..m1].to_vec();
    let mut d2 = idx[m1..].to_vec();
    d1.sort_unstable();
    d2.sort_unstable();
    Ok((d1, d2))
}

/// Splits into `(D1, D2)` with `|D1| = floor(pi m)`.
pub fn split(data: &Dataset, pi: f64, seed: Seed) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(data.len(), pi, seed)?;
    Ok((data.select(&a)?, data.select(&b)?))
}

/// Per-cell label means over the calibration split.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedPredictor {
    partition: ScaffoldPartition,
    h: ReprFn,
    values: Vec<f64>,
    counts: Vec<usize>,
    fallback: f64,
}

/// On-disk form of a [`BinnedPredictor`]: the partition is referenced, not
/// embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorFile {
    pub version: u32,
    pub partition_ref: String,
    pub h: ReprFn,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub fallback: f64,
}

impl BinnedPredictor {
    /// Assembles a predictor from fitted parts, validating shapes and ranges.
    pub fn from_parts(
        partition: ScaffoldPartition,
        h: ReprFn,
        values: Vec<f64>,
        counts: Vec<usize>,
        fallback: f64,
    ) -> Result<Self> {
        let k = partition.k();
        if values.len() != k || counts.len() != k {
            return Err(Error::DimensionMismatch {
                context: "predictor cells".into(),
                expected: k,
                got: values.len().max(counts.len()),
            });
        }
        if h.r() != partition.r() {
            return Err(Error::DimensionMismatch {
                context: "representation vs partition dimension".into(),
                expected: partition.r(),
                got: h.r(),
            });
        }
        if values.iter().chain([&fallback]).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("values", "predictions must lie in [0, 1]"));
        }
        Ok(BinnedPredictor {
            partition,
            h,
            values,
            counts,
            fallback,
        })
    }

    pub fn partition(&self) -> &ScaffoldPartition {
        &self.partition
    }

    pub fn repr(&self) -> &ReprFn {
        &self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn fallback(&self) -> f64 {
        self.fallback
    }

    pub fn cell_of(&self, x: &[f64]) -> usize {
        self.partition.assign(&self.h, x)
    }

    /// Prediction of a cell: its mean, or the fallback if it had no
    /// calibration points.
    pub fn cell_value(&self, cell: usize) -> f64 {
        if self.counts[cell] == 0 {
            self.fallback
        } else {
            self.values[cell]
        }
    }

    pub fn to_file(&self, partition_ref: impl Into<String>) -> PredictorFile {
        PredictorFile {
            version: PREDICTOR_VERSION,
            partition_ref: partition_ref.into(),
            h: self.h.clone(),
            values: self.values.clone(),
            counts: self.counts.clone(),
            fallback: self.fallback,
        }
    }

    pub fn from_file(file: PredictorFile, partition: ScaffoldPartition) -> Result<Self> {
        if file.version != PREDICTOR_VERSION {
            return Err(Error::UnsupportedVersion {
                found: file.version,
                expected: PREDICTOR_VERSION,
            });
        }
        Self::from_parts(partition, file.h, file.values, file.counts, file.fallback)
    }

    pub fn save(&self, path: &Path, partition_ref: &str) -> Result<()> {
        crate::io::write_json(path, &self.to_file(partition_ref))
    }
}

impl Predictor for BinnedPredictor {
    fn predict(&self, x: &[f64]) -> f64 {
        self.cell_value(self.cell_of(x))
    }
}

/// Cell-mean fit: `values[k]` is the mean label of the `D2` points in cell
/// `k`; empty cells predict the overall `D2` mean.
pub fn fit_binned(partition: &ScaffoldPartition, h: &ReprFn, d2: &Dataset) -> Result<BinnedPredictor> {
    if d2.is_empty() {
        return Err(Error::Empty("calibration split"));
    }
    if d2.dim() != h.d() {
        return Err(Error::DimensionMismatch {
            context: "calibration data vs representation input".into(),
            expected: h.d(),
            got: d2.dim(),
        });
    }
    let k = partition.k();
    let cells = partition.assign_rows(h, d2.features());
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in cells.iter().enumerate() {
        sums[c] += d2.label(i);
        counts[c] += 1;
    }
    let fallback = d2.label_mean();
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { fallback } else { s / c as f64 })
        .collect();
    BinnedPredictor::from_parts(partition.clone(), h.clone(), values, counts, fallback)
}

/// The full pipeline: split, build the cells on `D1`, fit the cell means on `D2`.
pub fn meta_algorithm(data: &Dataset, h: &ReprFn, b: usize, pi: f64, seed: Seed) -> Result<BinnedPredictor> {
    meta_algorithm_with_mode(data, h, b, pi, seed, QuantileMode::Conditional)
}

pub fn meta_algorithm_with_mode(
    data: &Dataset,
    h: &ReprFn,
    b: usize,
    pi: f64,
    seed: Seed,
    mode: QuantileMode,
) -> Result<BinnedPredictor> {
    let (d1, d2) = split(data, pi, seed)?;
    let partition = build_partition(h, &d1, b, mode)?;
    fit_binned(&partition, h, &d2)
}

/// Recalibrates `p0 = w o h` over the cells of its own representation
/// `h = prefix(p0, depth)`. Same computation as [`meta_algorithm`].
pub fn no_harm_postprocess(
    p0: &MlpSpec,
    depth: usize,
    data: &Dataset,
    b: usize,
    pi: f64,
    seed: Seed,
) -> Result<BinnedPredictor> {
    let h = ReprFn::mlp_prefix(p0.clone(), depth)?;
    meta_algorithm(data, &h, b, pi, seed)
}
