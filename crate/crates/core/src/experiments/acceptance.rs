//! The acceptance suite: eight end-to-end checks with pinned tolerances.
//!
//! Each check runs a fixed, seeded experiment and returns a
//! [`CriterionOutcome`] with a one-line verdict and the measured numbers.
//! The rate checks reuse [`run_sweep`](super::run_sweep) with the kind's
//! preset, so they exercise exactly what `scaffolding sweep` runs.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;
use serde_json::json;

use super::{run_sweep, ExperimentConfig, ExperimentKind, SweepResult};
use crate::calibrate::{
    iterative_multicalibrate, meta_algorithm, meta_algorithm_with_mode, split_indices, BinnedPredictor,
    ConstantPredictor, GroupCollection, PatchConfig, Predictor,
};
use crate::datagen::{
    random_orthonormal_rows, random_smooth, sample_dataset, Activation, Dataset, InputLaw, Layer, MlpSpec,
};
use crate::error::Result;
use crate::metrics::{calibration_report, exact_calibration_enumerable, fit_rate, sample_enumerable, DomainPoint};
use crate::represent::{moment_mc, ols, procrustes_with_check, symmetric_moment};
use crate::rng::{stream, Seed};
use crate::scaffold::{Node, QuantileMode, ReprFn, ScaffoldPartition};

/// Calibration-rate slope window and fit quality.
pub const CALIBRATION_SLOPE: (f64, f64) = (-0.65, -0.35);
pub const CALIBRATION_MIN_R2: f64 = 0.9;
/// Moment identity: allowed z-score, and tolerance of the analytic case.
pub const MOMENT_MAX_Z: f64 = 4.0;
pub const ANALYTIC_TOL: f64 = 0.005;
/// Projection and transfer squared-error slope window.
pub const SQUARED_SLOPE: (f64, f64) = (-1.25, -0.75);
/// Transfer recovery: distance bound at the reference size, and the
/// number of seeds that must meet it.
pub const TRANSFER_DISTANCE: f64 = 0.1;
pub const TRANSFER_REFERENCE_N: usize = 5000;
pub const TRANSFER_MIN_SEEDS: usize = 18;
pub const TRANSFER_RATE_N: [usize; 5] = [500, 1000, 2000, 4000, 8000];
/// Accuracy vs B: allowed distance between the empirical and the fitted
/// optimal B.
pub const ARGMIN_TOL: f64 = 2.0;
/// No harm: required improvement and the number of configs that must show it.
pub const NO_HARM_IMPROVEMENT: f64 = 0.01;
pub const NO_HARM_MIN_CONFIGS: usize = 18;
/// Oracle equivalence: domains, points per domain, fresh size, SE multiple
/// and the required share of matching cells.
pub const ORACLE_DOMAINS: usize = 25;
pub const ORACLE_POINTS: usize = 64;
pub const ORACLE_FRESH: usize = 1_000_000;
pub const ORACLE_SE_MULTIPLE: f64 = 3.0;
pub const ORACLE_MIN_SHARE: f64 = 0.95;
/// Invariant battery: cases per invariant.
pub const INVARIANT_CASES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    CalibrationRate,
    MomentIdentity,
    ProjectionRate,
    TransferRecovery,
    AccuracyVsBins,
    NoHarm,
    OracleEquivalence,
    Invariants,
}

impl Criterion {
    pub const ALL: [Criterion; 8] = [
        Criterion::CalibrationRate,
        Criterion::MomentIdentity,
        Criterion::ProjectionRate,
        Criterion::TransferRecovery,
        Criterion::AccuracyVsBins,
        Criterion::NoHarm,
        Criterion::OracleEquivalence,
        Criterion::Invariants,
    ];

    pub fn id(self) -> u8 {
        Criterion::ALL.iter().position(|c| *c == self).expect("listed") as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Criterion::ALL.get(usize::from(id).checked_sub(1)?).copied()
    }

    pub fn title(self) -> &'static str {
        match self {
            Criterion::CalibrationRate => "calibration error rate",
            Criterion::MomentIdentity => "symmetric moment identity",
            Criterion::ProjectionRate => "representation recovery rate",
            Criterion::TransferRecovery => "transfer subspace recovery",
            Criterion::AccuracyVsBins => "accuracy vs B",
            Criterion::NoHarm => "no harm",
            Criterion::OracleEquivalence => "oracle equivalence",
            Criterion::Invariants => "invariant suites",
        }
    }

    /// Runtime budget in seconds.
    pub fn budget(self) -> f64 {
        60.0 * match self {
            Criterion::CalibrationRate => 5.0,
            Criterion::MomentIdentity => 2.0,
            Criterion::ProjectionRate => 5.0,
            Criterion::TransferRecovery => 10.0,
            Criterion::AccuracyVsBins => 5.0,
            Criterion::NoHarm => 5.0,
            Criterion::OracleEquivalence => 3.0,
            Criterion::Invariants => 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub criterion: Criterion,
    pub passed: bool,
    pub summary: String,
    pub seconds: f64,
    pub details: serde_json::Value,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}. {}: {} ({:.1} s of {:.0} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.criterion.title(),
            self.summary,
            self.seconds,
            self.criterion.budget()
        )
    }
}

struct Verdict {
    passed: bool,
    summary: String,
    details: serde_json::Value,
}

/// Runs one criterion. Errors are reported as failures.
pub fn run(c: Criterion) -> CriterionOutcome {
    let start = Instant::now();
    let v = match c {
        Criterion::CalibrationRate => calibration_rate(),
        Criterion::MomentIdentity => moment_identity(),
        Criterion::ProjectionRate => projection_rate(),
        Criterion::TransferRecovery => transfer_recovery(),
        Criterion::AccuracyVsBins => accuracy_vs_bins(),
        Criterion::NoHarm => no_harm(),
        Criterion::OracleEquivalence => oracle_equivalence(),
        Criterion::Invariants => invariants(),
    };
    let seconds = start.elapsed().as_secs_f64();
    let v = v.unwrap_or_else(|e| Verdict {
        passed: false,
        summary: format!("error: {e}"),
        details: json!(null),
    });
    let in_budget = seconds <= c.budget();
    CriterionOutcome {
        id: c.id(),
        criterion: c,
        passed: v.passed && in_budget,
        summary: if in_budget { v.summary } else { format!("{}; over the runtime budget", v.summary) },
        seconds,
        details: v.details,
    }
}

pub fn run_all() -> Vec<CriterionOutcome> {
    Criterion::ALL.iter().map(|&c| run(c)).collect()
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

fn preset(kind: ExperimentKind) -> Result<SweepResult> {
    run_sweep(&ExperimentConfig::preset(kind))
}

fn column(res: &SweepResult, name: &str) -> Vec<f64> {
    res.rows.iter().map(|r| r.get(res.config.kind, name).expect("column exists")).collect()
}

fn calibration_rate() -> Result<Verdict> {
    let res = preset(ExperimentKind::CalibrationRate)?;
    let fit = &res.summary.rate_fits.first().expect("seven sizes give a fit").fit;
    Ok(Verdict {
        passed: within(fit.slope, CALIBRATION_SLOPE) && fit.r_squared >= CALIBRATION_MIN_R2,
        summary: format!(
            "slope {:.3} in [{}, {}], r^2 {:.3} >= {}",
            fit.slope, CALIBRATION_SLOPE.0, CALIBRATION_SLOPE.1, fit.r_squared, CALIBRATION_MIN_R2
        ),
        details: json!({"means": res.summary.means, "fit": fit}),
    })
}

/// `p*(x) = max(0, x_0)` on `Uniform[-1, 1]`: `E[p* X] = 1/6`.
fn analytic_relu_moment(n_mc: usize) -> Result<(f64, f64)> {
    let layers = vec![
        Layer::unbiased(vec![vec![1.0]], Activation::Relu)?,
        Layer::unbiased(vec![vec![1.0]], Activation::Identity)?,
    ];
    let spec = MlpSpec::new(1, layers, 1.0, true)?;
    let law = InputLaw::uniform_box(1, 1.0)?;
    let (mc, _) = moment_mc(&spec, &law, n_mc, Seed(6))?;
    let est = symmetric_moment(&spec, &law, n_mc, Seed(6))?;
    Ok((mc[0], est.closed_form[0]))
}

fn moment_identity() -> Result<Verdict> {
    let res = preset(ExperimentKind::SymmetricMoment)?;
    let z = column(&res, "max_z");
    let worst = z.iter().copied().fold(0.0, f64::max);
    let (mc, closed) = analytic_relu_moment(res.config.n_grid[0])?;
    let analytic_err = (mc - 1.0 / 6.0).abs();
    let closed_err = (closed - 1.0 / 6.0).abs();
    Ok(Verdict {
        passed: worst <= MOMENT_MAX_Z && analytic_err <= ANALYTIC_TOL && closed_err < 1e-12,
        summary: format!(
            "{} specs, max z {:.2} <= {}; analytic 1/6 case off by {:.2e} <= {}",
            z.len(),
            worst,
            MOMENT_MAX_Z,
            analytic_err,
            ANALYTIC_TOL
        ),
        details: json!({"max_z": z, "analytic_mc": mc, "analytic_closed_form": closed}),
    })
}

fn projection_rate() -> Result<Verdict> {
    let res = preset(ExperimentKind::ProjectionRate)?;
    let fit = &res.summary.rate_fits.first().expect("five sizes give a fit").fit;
    Ok(Verdict {
        passed: within(fit.slope, SQUARED_SLOPE),
        summary: format!("slope {:.3} in [{}, {}]", fit.slope, SQUARED_SLOPE.0, SQUARED_SLOPE.1),
        details: json!({"means": res.summary.means, "fit": fit}),
    })
}

fn transfer_recovery() -> Result<Verdict> {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut details = serde_json::Map::new();
    for kind in [ExperimentKind::TransferCovariate, ExperimentKind::TransferConcept] {
        let res = preset(kind)?;
        let good = res
            .rows
            .iter()
            .filter(|r| r.n == TRANSFER_REFERENCE_N)
            .filter(|r| r.get(kind, "distance").expect("column") < TRANSFER_DISTANCE)
            .count();
        let pts: Vec<(f64, f64)> = res
            .summary
            .means
            .iter()
            .filter(|m| TRANSFER_RATE_N.contains(&m.n))
            .map(|m| (m.n as f64, m.mean))
            .collect();
        let fit = fit_rate(&pts)?;
        let ok = good >= TRANSFER_MIN_SEEDS && within(fit.slope, SQUARED_SLOPE);
        passed &= ok;
        let short = kind.name().trim_start_matches("transfer_");
        parts.push(format!(
            "{short}: {good}/{} seeds < {TRANSFER_DISTANCE}, slope {:.3}",
            res.config.seeds.len(),
            fit.slope
        ));
        details.insert(kind.name().into(), json!({"seeds_within": good, "means": res.summary.means, "fit": fit}));
    }
    Ok(Verdict {
        passed,
        summary: format!(
            "{} (need >= {TRANSFER_MIN_SEEDS}, slope in [{}, {}])",
            parts.join("; "),
            SQUARED_SLOPE.0,
            SQUARED_SLOPE.1
        ),
        details: details.into(),
    })
}

/// Weighted least-squares fit of `mse(B) = A B^r / n2 + C / B^2`, with
/// weights `1 / mse^2` so every B counts in relative terms. Returns `(A, C)`.
pub fn fit_bias_variance(curve: &[(usize, f64)], r: usize, n2: f64) -> Option<(f64, f64)> {
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(b, m) in curve {
        let bf = b as f64;
        let f1 = bf.powi(r as i32) / n2;
        let f2 = 1.0 / (bf * bf);
        let w = 1.0 / (m * m);
        s11 += w * f1 * f1;
        s12 += w * f1 * f2;
        s22 += w * f2 * f2;
        t1 += w * f1 * m;
        t2 += w * f2 * m;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < f64::MIN_POSITIVE {
        return None;
    }
    Some(((s22 * t1 - s12 * t2) / det, (s11 * t2 - s12 * t1) / det))
}

/// Minimizer of `A B^r / n2 + C / B^2` over real `B > 0`.
pub fn optimal_b(a: f64, c: f64, r: usize, n2: f64) -> f64 {
    (2.0 * c * n2 / (r as f64 * a)).powf(1.0 / (r as f64 + 2.0))
}

fn accuracy_vs_bins() -> Result<Verdict> {
    let res = preset(ExperimentKind::AccuracyVsBins)?;
    let cfg = &res.config;
    let n = cfg.n_grid[0];
    let n2 = n as f64 - (cfg.pi * n as f64).floor();
    let curve: Vec<(usize, f64)> = res.summary.means.iter().map(|m| (m.b, m.mean)).collect();
    let (argmin, min) = curve.iter().copied().fold((0, f64::INFINITY), |acc, p| if p.1 < acc.1 { p } else { acc });
    let first = curve.first().expect("nonempty").1;
    let last = curve.last().expect("nonempty").1;
    let u_shaped = first > min && last > min;
    let (a, c) = fit_bias_variance(&curve, cfg.r, n2).unwrap_or((f64::NAN, f64::NAN));
    let b_star = optimal_b(a, c, cfg.r, n2);
    let rate_b = (n as f64).powf(1.0 / (cfg.r as f64 + 2.0));
    let constant = b_star / rate_b;
    let near = (argmin as f64 - b_star).abs() <= ARGMIN_TOL;
    Ok(Verdict {
        passed: u_shaped && near && a > 0.0 && c > 0.0,
        summary: format!(
            "U-shaped {u_shaped} (B=1 {first:.4}, B={argmin} {min:.4}, B=12 {last:.4}); argmin {argmin} vs fitted {b_star:.2} = {constant:.3} x n^(1/4) = {constant:.3} x {rate_b:.2} (tol {ARGMIN_TOL})"
        ),
        details: json!({"curve": curve, "a": a, "c": c, "b_star": b_star, "constant": constant, "n_rate": rate_b}),
    })
}

fn no_harm() -> Result<Verdict> {
    let res = preset(ExperimentKind::NoHarm)?;
    let p0 = column(&res, "mse_p0");
    let ph = column(&res, "mse_phat");
    let slack = column(&res, "slack");
    // The recalibrated predictor only sees the first layer, so it is also
    // the recalibration of the truth itself, whose MSE is zero.
    let within_slack = ph.iter().zip(&p0).zip(&slack).filter(|((h, p), s)| **h <= **p + **s && **h <= **s).count();
    let improved = ph.iter().zip(&p0).filter(|(h, p)| **p - **h > NO_HARM_IMPROVEMENT).count();
    let configs = ph.len();
    Ok(Verdict {
        passed: within_slack == configs && improved >= NO_HARM_MIN_CONFIGS,
        summary: format!(
            "{within_slack}/{configs} within slack {:.4}; {improved}/{configs} improve by > {NO_HARM_IMPROVEMENT} (need >= {NO_HARM_MIN_CONFIGS})",
            slack[0]
        ),
        details: json!({"mse_p0": p0, "mse_phat": ph, "slack": slack}),
    })
}

/// Random finite 1-d domain: points `0..m` with Dirichlet(1) weights and
/// uniform `p*` in `[0.05, 0.95]`.
pub fn random_domain(m: usize, seed: Seed) -> Vec<DomainPoint> {
    let mut rng = seed.derive(stream::DOMAIN).rng();
    let raw: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let mut pts: Vec<DomainPoint> = raw
        .iter()
        .enumerate()
        .map(|(i, w)| DomainPoint {
            x: vec![i as f64],
            weight: w / total,
            p_star: rng.random_range(0.05..=0.95),
        })
        .collect();
    // Absorb rounding so the weights sum to one within the checker's 1e-10.
    let s: f64 = pts.iter().map(|p| p.weight).sum();
    pts[0].weight += 1.0 - s;
    pts
}

/// Per-cell comparison of a sampled report against the exact one:
/// `(matching cells, cells)`.
pub fn oracle_match(domain: &[DomainPoint], pred: &BinnedPredictor, n: usize, seed: Seed) -> Result<(usize, usize)> {
    let exact = exact_calibration_enumerable(domain, pred, |x| pred.cell_of(x))?;
    let fresh = sample_enumerable(domain, n, seed)?;
    let sampled = calibration_report(pred, &fresh)?;
    let mut ok = 0;
    for cell in &exact.per_cell {
        if let Some(s) = sampled.per_cell.iter().find(|s| s.group == cell.cell) {
            if (s.mean_residual - cell.mean_residual).abs() <= ORACLE_SE_MULTIPLE * s.se {
                ok += 1;
            }
        }
    }
    Ok((ok, exact.per_cell.len()))
}

/// Predictor for a domain: eight cells over the identity, fitted on a small
/// sample so that it is visibly miscalibrated.
pub fn domain_predictor(domain: &[DomainPoint], seed: Seed) -> Result<BinnedPredictor> {
    let train = sample_enumerable(domain, 400, seed.derive(stream::INPUTS))?;
    meta_algorithm(&train, &ReprFn::coordinates(1, &[0])?, 8, 0.5, seed)
}

fn oracle_equivalence() -> Result<Verdict> {
    let (mut ok, mut total) = (0, 0);
    for i in 0..ORACLE_DOMAINS {
        let seed = Seed(i as u64);
        let domain = random_domain(ORACLE_POINTS, seed);
        let pred = domain_predictor(&domain, seed)?;
        let (a, b) = oracle_match(&domain, &pred, ORACLE_FRESH, seed.derive(stream::FRESH))?;
        ok += a;
        total += b;
    }
    let share = ok as f64 / total as f64;
    Ok(Verdict {
        passed: share >= ORACLE_MIN_SHARE,
        summary: format!(
            "{ok}/{total} (domain, cell) pairs within {ORACLE_SE_MULTIPLE} SE = {:.1}% (need >= {:.0}%)",
            100.0 * share,
            100.0 * ORACLE_MIN_SHARE
        ),
        details: json!({"matching": ok, "cells": total}),
    })
}

/// Boxes `[lo, hi)` of every leaf, with the leaf's cell id.
pub fn leaf_boxes(root: &Node, r: usize) -> Vec<(usize, Vec<(f64, f64)>)> {
    fn walk(node: &Node, bounds: &mut Vec<(f64, f64)>, out: &mut Vec<(usize, Vec<(f64, f64)>)>) {
        match node {
            Node::Leaf { cell } => out.push((*cell, bounds.clone())),
            Node::Split { coord, cuts, children } => {
                let saved = bounds[*coord];
                for (j, child) in children.iter().enumerate() {
                    let lo = if j == 0 { f64::NEG_INFINITY } else { cuts[j - 1] };
                    let hi = if j == cuts.len() { f64::INFINITY } else { cuts[j] };
                    bounds[*coord] = (lo.max(saved.0), hi.min(saved.1));
                    walk(child, bounds, out);
                }
                bounds[*coord] = saved;
            }
        }
    }
    let mut out = Vec::new();
    walk(root, &mut vec![(f64::NEG_INFINITY, f64::INFINITY); r], &mut out);
    out
}

fn in_box(v: &[f64], bx: &[(f64, f64)]) -> bool {
    v.iter().zip(bx).all(|(x, (lo, hi))| *lo <= *x && *x < *hi)
}

/// Totality (every point in exactly one leaf box, which is the cell it is
/// assigned to), training routing, and balance in conditional mode.
fn partition_case(seed: Seed) -> Result<bool> {
    let mut rng = seed.rng();
    let r = rng.random_range(1..=3usize);
    let b = rng.random_range(1..=4usize);
    let k = b.pow(r as u32);
    let n = k + rng.random_range(0..300usize);
    let mode = if rng.random_bool(0.5) { QuantileMode::Conditional } else { QuantileMode::GlobalGrid };
    let values: Vec<f64> = (0..n * r).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (part, routing) = ScaffoldPartition::from_values(&values, r, b, mode)?;
    let counts = part.train_counts();
    let mut ok = counts.iter().sum::<usize>() == n && counts.len() == k;
    if mode == QuantileMode::Conditional {
        let (lo, hi) = (n / k, n.div_ceil(k) + r);
        ok &= counts.iter().all(|c| (lo..=hi).contains(c));
    }
    ok &= values.chunks_exact(r).zip(&routing).all(|(v, c)| part.assign_value(v) == *c);
    let boxes = leaf_boxes(part.root(), r);
    ok &= boxes.len() == k;
    for i in 0..200 {
        let q: Vec<f64> = (0..r)
            .map(|_| match i % 4 {
                0 => values[rng.random_range(0..n * r)],
                1 => rng.random_range(-1e9..1e9),
                _ => 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
            })
            .collect();
        let hits: Vec<usize> = boxes.iter().filter(|(_, bx)| in_box(&q, bx)).map(|(c, _)| *c).collect();
        ok &= hits.len() == 1 && hits[0] == part.assign_value(&q);
    }
    Ok(ok)
}

fn range_case(seed: Seed) -> Result<bool> {
    let mut rng = seed.rng();
    let d = rng.random_range(1..=4usize);
    let law = InputLaw::uniform_box(d, 1.0)?;
    let spec = crate::datagen::clamp_for_law(&random_smooth(d, &[3], Activation::Sigmoid, 2.0, seed)?, &law, seed)?;
    let n = rng.random_range(100..1000usize);
    let data = sample_dataset(&spec, &law, n, seed.derive(stream::INPUTS))?;
    let h = ReprFn::coordinates(d, &[0])?;
    let b = rng.random_range(1..=8usize);
    let pred = meta_algorithm(&data, &h, b, 0.5, seed)?;
    let groups = GroupCollection::from_partition(pred.partition(), pred.repr());
    let p0 = ConstantPredictor(rng.random_range(0.0..=1.0));
    let patched = iterative_multicalibrate(p0, &groups, &data, PatchConfig::default())?.predictor;
    let fresh = law.sample(300, seed.derive(stream::FRESH));
    let mut probes: Vec<Vec<f64>> = fresh.chunks_exact(d).map(|x| x.to_vec()).collect();
    probes.push(vec![1e6; d]);
    probes.push(vec![-1e6; d]);
    Ok(probes.iter().all(|x| {
        let a = pred.predict(x);
        let c = patched.predict(x);
        (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&c)
    }))
}

fn split_case(seed: Seed) -> Result<bool> {
    let mut rng = seed.rng();
    let m = rng.random_range(2..5000usize);
    let pi = rng.random_range(0.01..0.99);
    let m1 = (pi * m as f64).floor() as usize;
    let (a, b) = match split_indices(m, pi, seed) {
        Ok(v) => v,
        // Refusing is required exactly when a side would be empty.
        Err(_) => return Ok(m1 == 0 || m1 == m),
    };
    let mut seen = vec![0u8; m];
    for &i in a.iter().chain(&b) {
        seen[i] += 1;
    }
    let again = split_indices(m, pi, seed)?;
    Ok(seen.iter().all(|c| *c == 1) && a.len() == m1 && again == (a, b))
}

fn procrustes_case(seed: Seed) -> Result<bool> {
    let mut rng = seed.rng();
    let r = rng.random_range(1..=4usize);
    let d = rng.random_range(r..=10usize);
    let w = random_orthonormal_rows(r, d, seed.derive(1))?;
    let other = random_orthonormal_rows(r, d, seed.derive(2))?;
    let q = random_orthonormal_rows(r, r, seed.derive(3))?;
    let (self_dist, self_check) = procrustes_with_check(&(&q * &w), &w)?;
    let (d1, c1) = procrustes_with_check(&other, &w)?;
    let (d2, _) = procrustes_with_check(&(&q * &other), &w)?;
    Ok(self_dist < 1e-10 && self_check < 1e-6 && (d1 - d2).abs() < 1e-10 && (d1 * d1 - c1 * c1).abs() < 1e-8)
}

fn ols_case(seed: Seed) -> Result<bool> {
    let mut rng = seed.rng();
    let d = rng.random_range(1..=8usize);
    let n = rng.random_range(d + 5..200usize);
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fit = ols(&x, d, &y)?;
    let xm = DMatrix::from_row_slice(n, d, &x);
    let resid = nalgebra::DVector::from_column_slice(&y) - &xm * nalgebra::DVector::from_column_slice(&fit.beta);
    let g = xm.transpose() * resid;
    let xty = xm.transpose() * nalgebra::DVector::from_column_slice(&y);
    Ok(g.amax() <= 1e-8 * xty.amax().max(1.0))
}

fn roundtrip_case(seed: Seed, scratch: &std::path::Path) -> Result<bool> {
    let mut rng = seed.rng();
    let d = rng.random_range(1..=4usize);
    let law = if rng.random_bool(0.5) {
        InputLaw::uniform_box(d, rng.random_range(0.5..3.0))?
    } else {
        InputLaw::gaussian(&super::random_covariance(d, seed)?)?
    };
    let spec = random_smooth(d, &[rng.random_range(1..4usize)], Activation::Softplus, 1.5, seed)?;
    let spec = crate::datagen::clamp_for_law(&spec, &law, seed)?;
    let n = rng.random_range(20..300usize);
    let data = sample_dataset(&spec, &law, n, seed)?;
    let h = ReprFn::coordinates(d, &[0])?;
    let pred = meta_algorithm_with_mode(&data, &h, rng.random_range(1..=4usize), 0.5, seed, QuantileMode::Conditional)?;

    let spec_back: MlpSpec = crate::io::from_json_str(&serde_json::to_string(&spec)?, "spec")?;
    let law_back: InputLaw = crate::io::from_json_str(&serde_json::to_string(&law)?, "law")?;
    let part_back = ScaffoldPartition::from_json(&pred.partition().to_json(), "partition")?;
    let file = pred.to_file("partition.json");
    let file_back = crate::io::from_json_str(&serde_json::to_string(&file)?, "predictor")?;
    let pred_back = BinnedPredictor::from_file(file_back, part_back.clone())?;
    let csv = scratch.join(format!("case{}.csv", seed.0));
    data.save(&csv, &data.meta())?;
    let data_back = Dataset::load(&csv)?;
    let _ = std::fs::remove_file(&csv);
    let _ = std::fs::remove_file(Dataset::sidecar_path(&csv));
    Ok(spec_back == spec
        && law_back.kind() == law.kind()
        && law_back.dim() == law.dim()
        && &part_back == pred.partition()
        && pred_back == pred
        && data_back == data)
}

fn invariants() -> Result<Verdict> {
    let scratch = std::env::temp_dir().join(format!("scaffolding-accept-{}", std::process::id()));
    std::fs::create_dir_all(&scratch)?;
    type Case<'a> = Box<dyn Fn(Seed) -> Result<bool> + 'a>;
    let suites: Vec<(&str, Case)> = vec![
        ("partition totality/balance", Box::new(partition_case)),
        ("predictor range", Box::new(range_case)),
        ("split disjointness", Box::new(split_case)),
        ("procrustes rotation invariance", Box::new(procrustes_case)),
        ("ols residual orthogonality", Box::new(ols_case)),
        ("serialization round trips", Box::new(|s| roundtrip_case(s, &scratch))),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    let mut details = serde_json::Map::new();
    for (i, (name, case)) in suites.iter().enumerate() {
        let mut failures = Vec::new();
        for c in 0..INVARIANT_CASES {
            let seed = Seed(1000 * (i as u64 + 1) + c as u64);
            match case(seed) {
                Ok(true) => {}
                Ok(false) => failures.push(format!("seed {}", seed.0)),
                Err(e) => failures.push(format!("seed {}: {e}", seed.0)),
            }
        }
        passed &= failures.is_empty();
        parts.push(format!("{}/{}", INVARIANT_CASES - failures.len(), INVARIANT_CASES));
        details.insert((*name).into(), json!(failures));
    }
    let _ = std::fs::remove_dir_all(&scratch);
    Ok(Verdict {
        passed,
        summary: format!("{} suites x {INVARIANT_CASES} cases, passing {}", suites.len(), parts.join(", ")),
        details: details.into(),
    })
}
