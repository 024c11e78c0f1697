//! Iterative multi-calibration by slice corrections.
//!
//! A slice is a pair (group, value bucket): the points of a group whose
//! current prediction falls in bucket `floor(p / lambda)`. While some slice
//! has empirical mass at least `alpha / |groups|` and a mean residual
//! `y - p` larger than `alpha` in absolute value, the slice with the largest
//! `mass * residual^2` is shifted by its residual and clipped to `[0, 1]`.
//! Each shift lowers the empirical squared error by about `mass *
//! residual^2 >= alpha^3 / |groups|`, which bounds the number of rounds.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GroupCollection, Predictor};
use crate::datagen::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub alpha: f64,
    /// Value-bucket width.
    pub lambda: f64,
    pub max_iters: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            alpha: 0.05,
            lambda: 0.1,
            max_iters: 1000,
        }
    }
}

/// One accepted correction. Squared errors are empirical means over the
/// patching data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    pub group: String,
    #[serde(skip)]
    pub group_index: usize,
    pub bucket: usize,
    pub shift: f64,
    pub sq_err_before: f64,
    pub sq_err_after: f64,
}

pub fn num_buckets(lambda: f64) -> usize {
    ((1.0 / lambda).ceil() as usize).max(1)
}

#[inline]
pub fn bucket_of(p: f64, lambda: f64) -> usize {
    ((p / lambda).floor().max(0.0) as usize).min(num_buckets(lambda) - 1)
}

/// `p0` followed by the recorded corrections, replayed in order.
#[derive(Debug, Clone)]
pub struct PatchedPredictor<P> {
    base: P,
    groups: GroupCollection,
    lambda: f64,
    adjustments: Vec<Adjustment>,
}

impl<P: Predictor> PatchedPredictor<P> {
    pub fn adjustments(&self) -> &[Adjustment] {
        &self.adjustments
    }

    pub fn base(&self) -> &P {
        &self.base
    }

    /// Audit trail as JSON lines.
    pub fn write_audit(&self, mut out: impl Write) -> Result<()> {
        for a in &self.adjustments {
            serde_json::to_writer(&mut out, a)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_audit(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_audit(f)
    }
}

impl<P: Predictor> Predictor for PatchedPredictor<P> {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut p = self.base.predict(x).clamp(0.0, 1.0);
        for a in &self.adjustments {
            if bucket_of(p, self.lambda) == a.bucket && self.groups.groups()[a.group_index].contains(x) {
                p = (p + a.shift).clamp(0.0, 1.0);
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct PatchOutcome<P> {
    pub predictor: PatchedPredictor<P>,
    /// `false` when `max_iters` was reached with a violating slice left.
    pub converged: bool,
}

fn mse(p: &[f64], y: &[u8]) -> f64 {
    p.iter().zip(y).map(|(a, b)| (a - f64::from(*b)).powi(2)).sum::<f64>() / p.len() as f64
}

/// Patches `p0` until no slice of `groups` is `alpha`-miscalibrated on
/// `data`, or `max_iters` corrections were made. Non-convergence is
/// reported in the outcome and logged.
pub fn iterative_multicalibrate<P: Predictor>(
    p0: P,
    groups: &GroupCollection,
    data: &Dataset,
    cfg: PatchConfig,
) -> Result<PatchOutcome<P>> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::param("alpha", "must be positive"));
    }
    if !(cfg.lambda > 0.0 && cfg.lambda <= 1.0) {
        return Err(Error::param("lambda", "must lie in (0, 1]"));
    }
    if groups.is_empty() {
        return Err(Error::Empty("group collection"));
    }
    let n = data.len();
    let g = groups.len();
    let nb = num_buckets(cfg.lambda);
    let member: Vec<Vec<bool>> = data
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|x| groups.groups().iter().map(|gr| gr.contains(x)).collect())
        .collect();
    let mut p: Vec<f64> = data
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|x| p0.predict(x).clamp(0.0, 1.0))
        .collect();
    let y = data.labels();
    let min_mass = cfg.alpha / g as f64;
    let mut adjustments = Vec::new();
    let mut converged = false;
    loop {
        let mut count = vec![0usize; g * nb];
        let mut resid = vec![0.0; g * nb];
        for i in 0..n {
            let bkt = bucket_of(p[i], cfg.lambda);
            let e = f64::from(y[i]) - p[i];
            for (gi, _) in member[i].iter().enumerate().filter(|(_, m)| **m) {
                count[gi * nb + bkt] += 1;
                resid[gi * nb + bkt] += e;
            }
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for s in 0..g * nb {
            if count[s] == 0 {
                continue;
            }
            let mass = count[s] as f64 / n as f64;
            let r = resid[s] / count[s] as f64;
            if mass >= min_mass && r.abs() > cfg.alpha {
                let score = mass * r * r;
                if best.is_none_or(|(_, _, sc)| score > sc) {
                    best = Some((s, r, score));
                }
            }
        }
        let Some((slice, shift, _)) = best else {
            converged = true;
            break;
        };
        if adjustments.len() >= cfg.max_iters {
            break;
        }
        let (gi, bkt) = (slice / nb, slice % nb);
        let before = mse(&p, y);
        for i in 0..n {
            if member[i][gi] && bucket_of(p[i], cfg.lambda) == bkt {
                p[i] = (p[i] + shift).clamp(0.0, 1.0);
            }
        }
        let after = mse(&p, y);
        adjustments.push(Adjustment {
            group: groups.groups()[gi].name().to_string(),
            group_index: gi,
            bucket: bkt,
            shift,
            sq_err_before: before,
            sq_err_after: after,
        });
    }
    if !converged {
        log::warn!(
            "multi-calibration patcher stopped after {} adjustments with a violating slice left",
            cfg.max_iters
        );
    }
    Ok(PatchOutcome {
        predictor: PatchedPredictor {
            base: p0,
            groups: groups.clone(),
            lambda: cfg.lambda,
            adjustments,
        },
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::ConstantPredictor;
    use crate::rng::Seed;

    fn labels_with_mean(n: usize, ones: usize) -> Dataset {
        let y: Vec<u8> = (0..n).map(|i| u8::from(i < ones)).collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        Dataset::new(x, 1, y, None, Seed(0)).unwrap()
    }

    #[test]
    fn calibrated_input_needs_no_adjustment() {
        let data = labels_with_mean(100, 60);
        let out = iterative_multicalibrate(ConstantPredictor(0.6), &GroupCollection::everything(), &data, PatchConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.predictor.adjustments().is_empty());
    }

    #[test]
    fn one_step_mean_correction() {
        let data = labels_with_mean(1000, 600);
        let out = iterative_multicalibrate(ConstantPredictor(0.0), &GroupCollection::everything(), &data, PatchConfig::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.predictor.adjustments().len(), 1);
        assert!((out.predictor.predict(&[3.0]) - 0.6).abs() < 1e-12);
        let a = &out.predictor.adjustments()[0];
        assert!(a.sq_err_after < a.sq_err_before);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let data = labels_with_mean(1000, 600);
        let cfg = PatchConfig {
            max_iters: 0,
            ..PatchConfig::default()
        };
        let out = iterative_multicalibrate(ConstantPredictor(0.0), &GroupCollection::everything(), &data, cfg).unwrap();
        assert!(!out.converged);
    }

    #[test]
    fn audit_lines() {
        let data = labels_with_mean(1000, 600);
        let out = iterative_multicalibrate(ConstantPredictor(0.0), &GroupCollection::everything(), &data, PatchConfig::default()).unwrap();
        let mut buf = Vec::new();
        out.predictor.write_audit(&mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(buf.split(|b| *b == b'\n').next().unwrap()).unwrap();
        for key in ["group", "bucket", "shift", "sq_err_before", "sq_err_after"] {
            assert!(line.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn buckets() {
        assert_eq!(num_buckets(0.1), 10);
        assert_eq!(bucket_of(1.0, 0.1), 9);
        assert_eq!(bucket_of(0.0, 0.1), 0);
        assert_eq!(bucket_of(0.35, 0.1), 3);
        assert_eq!(num_buckets(0.3), 4);
    }
}
