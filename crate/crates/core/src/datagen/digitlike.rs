//! Synthetic multi-level truth: `L` Gaussian clusters, each with its own
//! constant probability.
//!
//! Level `l` is drawn uniformly from `0..L`; `x = separation * l * e_1 + z`
//! with `z ~ N(0, I_d)`; `p*(x) = clamp(l / L, 0.02, 0.98)`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::Dataset;
use super::mlp::{CLAMP_HI, CLAMP_LO};
use super::zoo::bernoulli_labels;
use crate::error::{Error, Result};
use crate::rng::{stream, Seed};

pub const DEFAULT_SEPARATION: f64 = 6.0;

/// Clamped probability of level `l` out of `levels`.
pub fn level_probability(l: usize, levels: usize) -> f64 {
    (l as f64 / levels as f64).clamp(CLAMP_LO, CLAMP_HI)
}

pub fn digitlike_truth(levels: usize, d: usize, n: usize, seed: Seed) -> Result<Dataset> {
    digitlike_with_separation(levels, d, n, DEFAULT_SEPARATION, seed)
}

pub fn digitlike_with_separation(levels: usize, d: usize, n: usize, separation: f64, seed: Seed) -> Result<Dataset> {
    let (ds, _) = digitlike_levels(levels, d, n, separation, seed)?;
    Ok(ds)
}

/// Like [`digitlike_truth`] but also returns each row's level.
pub fn digitlike_levels(levels: usize, d: usize, n: usize, separation: f64, seed: Seed) -> Result<(Dataset, Vec<usize>)> {
    if !(2..=32).contains(&levels) {
        return Err(Error::param("levels", format!("need 2 <= L <= 32, got {levels}")));
    }
    if d == 0 {
        return Err(Error::param("d", "must be positive"));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::param("separation", "must be finite and nonnegative"));
    }
    let mut rng = seed.derive(stream::INPUTS).rng();
    let mut x = Vec::with_capacity(n * d);
    let mut lv = Vec::with_capacity(n);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n {
        let l = rng.random_range(0..levels);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.push(if j == 0 { separation * l as f64 + z } else { z });
        }
        lv.push(l);
        p.push(level_probability(l, levels));
    }
    let y = bernoulli_labels(&p, seed.derive(stream::LABELS));
    Ok((Dataset::new(x, d, y, Some(p), seed)?, lv))
}
