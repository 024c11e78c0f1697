use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::calibrate::{meta_algorithm_with_mode, no_harm_postprocess};
use crate::datagen::{
    clamp_for_law, corrupt_final_layer, digitlike_truth, random_homogeneous, random_orthonormal_rows, random_smooth,
    sample_dataset, sample_transfer, Activation, Dataset, InputLaw, Layer, MlpSpec, TransferTaskFamily,
};
use crate::error::{Error, Result};
use crate::metrics::{calibration_report, fit_rate, mse_vs_truth, RateFit};
use crate::represent::{gaussian_moment, ols_dataset, procrustes_distance, projection_error, symmetric_moment, multitask_subspace, MomentEstimate};
use crate::rng::{stream, Seed};
use crate::scaffold::ReprFn;

/// Version of the CSV layout, written in the header comment.
pub const SCHEMA_VERSION: u32 = 1;

/// Relative noise added to the scrambled final layer in no-harm runs.
pub const CORRUPTION_NOISE: f64 = 0.1;

/// Truncation radius of the random truncated-Gaussian laws.
pub const TRUNCATION: f64 = 2.0;

/// Eigenvalue range of random covariances.
pub const EIGEN_RANGE: (f64, f64) = (0.5, 2.0);

impl ExperimentKind {
    /// Metric columns written after `n,b,seed`.
    ///
    /// * `calibration_rate`: max cell gap on fresh data, MSE against the
    ///   truth, number of cells without fresh points.
    /// * `accuracy_vs_bins`: MSE against the truth, max cell gap.
    /// * `no_harm`: MSE of the corrupted network, MSE of its recalibration,
    ///   and the allowed slack. The recalibration depends on the network only
    ///   through its first layer, so it is also the recalibration of the
    ///   uncorrupted truth.
    /// * `symmetric_moment`, `gaussian_moment`: dimension, depth, max z-score
    ///   of the moment difference, its max absolute value and max SE.
    /// * `projection_rate`: squared prediction-norm error of the OLS
    ///   direction, condition number of the Gram matrix.
    /// * `transfer_*`: Procrustes distance, its square, the r-th and
    ///   (r+1)-th singular values of the stacked coefficients.
    /// * `digitlike`: MSE against the truth, max cell gap.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::CalibrationRate => &["max_gap", "mse", "excluded"],
            ExperimentKind::AccuracyVsBins | ExperimentKind::Digitlike => &["mse", "max_gap"],
            ExperimentKind::NoHarm => &["mse_p0", "mse_phat", "slack"],
            ExperimentKind::SymmetricMoment | ExperimentKind::GaussianMoment => {
                &["d", "depth", "max_z", "max_abs_diff", "max_se"]
            }
            ExperimentKind::ProjectionRate => &["sq_error", "gram_condition"],
            ExperimentKind::TransferCovariate | ExperimentKind::TransferConcept => {
                &["distance", "sq_distance", "sigma_r", "sigma_next"]
            }
        }
    }

    /// Column summarized and rate-fitted against `n`.
    pub fn primary(self) -> &'static str {
        match self {
            ExperimentKind::CalibrationRate => "max_gap",
            ExperimentKind::AccuracyVsBins | ExperimentKind::Digitlike => "mse",
            ExperimentKind::NoHarm => "mse_phat",
            ExperimentKind::SymmetricMoment | ExperimentKind::GaussianMoment => "max_z",
            ExperimentKind::ProjectionRate => "sq_error",
            ExperimentKind::TransferCovariate | ExperimentKind::TransferConcept => "sq_distance",
        }
    }

    /// Whether the kind has a partition, so that the B grid applies.
    pub fn uses_b(self) -> bool {
        matches!(
            self,
            ExperimentKind::CalibrationRate
                | ExperimentKind::AccuracyVsBins
                | ExperimentKind::NoHarm
                | ExperimentKind::Digitlike
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    /// 0 for kinds without a partition.
    pub b: usize,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl SweepRow {
    pub fn get(&self, kind: ExperimentKind, column: &str) -> Option<f64> {
        kind.columns().iter().position(|c| *c == column).map(|i| self.values[i])
    }
}

/// Mean of the primary metric over seeds at one `(n, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub n: usize,
    pub b: usize,
    pub mean: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BFit {
    pub b: usize,
    pub fit: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema: u32,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: usize,
    pub primary: String,
    pub means: Vec<CellMean>,
    /// Log-log fit of the mean primary metric against `n`, per `b`, when at
    /// least four sizes were run.
    pub rate_fits: Vec<BFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

/// Everything a point needs that depends on the seed but not on `(n, b)`.
enum Setup {
    Truth { spec: MlpSpec, law: InputLaw, h: ReprFn },
    NoHarm { spec: MlpSpec, p0: MlpSpec, law: InputLaw },
    Moment { spec: MlpSpec, law: InputLaw, d: usize, depth: usize },
    Projection { spec: MlpSpec, law: InputLaw, beta: Vec<f64>, sigma: DMatrix<f64> },
    Transfer(TransferTaskFamily),
    Digit { h: ReprFn },
}

/// `p*(x) = 0.05 + 0.9 sigmoid(2 x_0 + 2 x_1)`: Lipschitz, unclamped.
pub fn lipschitz_truth(d: usize) -> Result<MlpSpec> {
    let mut w = vec![0.0; d];
    w[0] = 2.0;
    if d > 1 {
        w[1] = 2.0;
    }
    let layers = vec![
        Layer::new(vec![w], vec![0.0], Activation::Sigmoid)?,
        Layer::new(vec![vec![0.9]], vec![0.05], Activation::Identity)?,
    ];
    MlpSpec::new(d, layers, 2.0, false)
}

/// Covariance `Q diag(e) Q^T` with eigenvalues uniform on [`EIGEN_RANGE`].
pub fn random_covariance(d: usize, seed: Seed) -> Result<DMatrix<f64>> {
    use rand::Rng as _;
    let q = random_orthonormal_rows(d, d, seed)?;
    let mut rng = seed.derive(stream::LAW).rng();
    let e = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        (0..d).map(|_| rng.random_range(EIGEN_RANGE.0..=EIGEN_RANGE.1)),
    ));
    let c = q.transpose() * e * q;
    Ok((&c + c.transpose()) * 0.5)
}

fn load_spec(cfg: &ExperimentConfig) -> Result<Option<MlpSpec>> {
    let Some(path) = &cfg.spec else { return Ok(None) };
    let spec: MlpSpec = crate::io::read_json(path)?;
    if spec.input_dim() != cfg.d {
        return Err(Error::Config(format!(
            "spec {} has input dimension {}, config has d = {}",
            path.display(),
            spec.input_dim(),
            cfg.d
        )));
    }
    Ok(Some(spec))
}

fn first_coords(cfg: &ExperimentConfig) -> Result<ReprFn> {
    ReprFn::coordinates(cfg.d, &(0..cfg.r).collect::<Vec<_>>())
}

fn setup(cfg: &ExperimentConfig, file_spec: &Option<MlpSpec>, seed: u64) -> Result<Setup> {
    let s = Seed(seed);
    let shared = Seed(cfg.spec_seed);
    let box_law = || match &cfg.law {
        Some(l) => Ok(l.clone()),
        None => InputLaw::uniform_box(cfg.d, 1.0),
    };
    Ok(match cfg.kind {
        ExperimentKind::CalibrationRate | ExperimentKind::AccuracyVsBins => {
            let law = box_law()?;
            let spec = match (file_spec, cfg.kind) {
                (Some(spec), _) => spec.clone(),
                (None, ExperimentKind::AccuracyVsBins) => lipschitz_truth(cfg.d)?,
                (None, _) => clamp_for_law(&random_smooth(cfg.d, &[8], Activation::Softplus, 1.0, shared)?, &law, shared)?,
            };
            Setup::Truth { spec, law, h: first_coords(cfg)? }
        }
        ExperimentKind::NoHarm => {
            let law = match &cfg.law {
                Some(l) => l.clone(),
                None => InputLaw::standard_gaussian(cfg.d)?,
            };
            let spec = match file_spec {
                Some(spec) => spec.clone(),
                None => {
                    let act = if seed.is_multiple_of(2) { Activation::Sigmoid } else { Activation::Softplus };
                    clamp_for_law(&random_smooth(cfg.d, &[cfg.r], act, 2.0, s)?, &law, s)?
                }
            };
            let p0 = corrupt_final_layer(&spec, &law, CORRUPTION_NOISE, s)?;
            Setup::NoHarm { spec, p0, law }
        }
        ExperimentKind::SymmetricMoment | ExperimentKind::GaussianMoment => {
            let dims = if cfg.dims.is_empty() { vec![cfg.d] } else { cfg.dims.clone() };
            let k = seed as usize;
            let d = match &cfg.law {
                Some(l) => l.dim(),
                None => dims[k % dims.len()],
            };
            let depth = 2 + (k / dims.len()) % 2;
            let cov = || random_covariance(d, s.derive(stream::LAW));
            if cfg.kind == ExperimentKind::SymmetricMoment {
                let law = match &cfg.law {
                    Some(l) => l.clone(),
                    None if (k / (2 * dims.len())).is_multiple_of(2) => InputLaw::uniform_box(d, 1.0)?,
                    None => InputLaw::sym_trunc_gaussian(&cov()?, TRUNCATION)?,
                };
                let spec = match file_spec {
                    Some(spec) => spec.clone(),
                    None => clamp_for_law(&random_homogeneous(d, depth, 3, s)?, &law, s)?,
                };
                Setup::Moment { spec, law, d, depth }
            } else {
                let law = match &cfg.law {
                    Some(l) => l.clone(),
                    None => InputLaw::gaussian(&cov()?)?,
                };
                let spec = match file_spec {
                    Some(spec) => spec.clone(),
                    None => {
                        let act = if depth == 2 { Activation::Sigmoid } else { Activation::Softplus };
                        let widths: Vec<usize> = (1..depth).map(|_| 3).collect();
                        clamp_for_law(&random_smooth(d, &widths, act, 1.0, s)?, &law, s)?
                    }
                };
                Setup::Moment { spec, law, d, depth }
            }
        }
        ExperimentKind::ProjectionRate => {
            let law = box_law()?;
            let spec = match file_spec {
                Some(spec) => spec.clone(),
                None => clamp_for_law(&random_homogeneous(cfg.d, 2, 3, shared)?, &law, shared)?,
            };
            let gain = spec.homogeneous_gain()?;
            let beta = spec.layers()[0].row(0).iter().map(|w| 0.5 * gain * w).collect();
            let sigma = law.covariance();
            Setup::Projection { spec, law, beta, sigma }
        }
        ExperimentKind::TransferCovariate => {
            Setup::Transfer(TransferTaskFamily::covariate(cfg.d, cfg.r, cfg.tasks, cfg.n_grid[0], s)?)
        }
        ExperimentKind::TransferConcept => {
            Setup::Transfer(TransferTaskFamily::concept(cfg.d, cfg.r, cfg.tasks, cfg.n_grid[0], s)?)
        }
        ExperimentKind::Digitlike => Setup::Digit { h: first_coords(cfg)? },
    })
}

/// Seed of the data drawn at one sweep point. Independent of `b`, so the
/// B grid is compared on common data.
pub fn point_seed(seed: u64, n: usize) -> Seed {
    Seed(seed).derive2(stream::POINT, n as u64)
}

fn moment_values(est: &MomentEstimate, d: usize, depth: usize) -> Vec<f64> {
    let max_se = est.diff_se.iter().copied().fold(0.0, f64::max);
    vec![d as f64, depth as f64, est.max_z(), est.max_abs_diff(), max_se]
}

fn run_point(cfg: &ExperimentConfig, setup: &Setup, n: usize, b: usize, seed: u64) -> Result<Vec<f64>> {
    let ps = point_seed(seed, n);
    Ok(match setup {
        Setup::Truth { spec, law, h } => {
            let data = sample_dataset(spec, law, n, ps)?;
            let pred = meta_algorithm_with_mode(&data, h, b, cfg.pi, ps, cfg.mode)?;
            let fresh = sample_dataset(spec, law, cfg.n_eval, ps.derive(stream::FRESH))?;
            let report = calibration_report(&pred, &fresh)?;
            let mse = mse_vs_truth(&pred, &fresh)?;
            match cfg.kind {
                ExperimentKind::CalibrationRate => vec![report.max_gap, mse, report.excluded.len() as f64],
                _ => vec![mse, report.max_gap],
            }
        }
        Setup::NoHarm { spec, p0, law } => {
            let data = sample_dataset(spec, law, n, ps)?;
            let fresh = sample_dataset(spec, law, cfg.n_eval, ps.derive(stream::FRESH))?;
            let phat = no_harm_postprocess(p0, 1, &data, b, cfg.pi, ps)?;
            let slack = no_harm_slack(b, cfg.r, n);
            vec![
                mse_vs_truth(p0, &fresh)?,
                mse_vs_truth(&phat, &fresh)?,
                slack,
            ]
        }
        Setup::Moment { spec, law, d, depth } => {
            let est = match cfg.kind {
                ExperimentKind::SymmetricMoment => symmetric_moment(spec, law, n, ps)?,
                _ => gaussian_moment(spec, law, n, ps)?,
            };
            moment_values(&est, *d, *depth)
        }
        Setup::Projection { spec, law, beta, sigma } => {
            let data = sample_dataset(spec, law, n, ps)?;
            let fit = ols_dataset(&data)?;
            vec![projection_error(&fit.beta, beta, sigma), fit.gram_condition]
        }
        Setup::Transfer(family) => {
            let fam = family.clone().with_n_per_task(n);
            let tasks = sample_transfer(&fam, ps)?;
            let est = multitask_subspace(&tasks, fam.r())?;
            let dist = procrustes_distance(&est.w_hat_matrix(), fam.w1())?;
            let sv = &est.singular_values;
            let r = fam.r();
            vec![dist, dist * dist, sv[r - 1], sv.get(r).copied().unwrap_or(0.0)]
        }
        Setup::Digit { h } => {
            let data = digitlike_truth(cfg.levels, cfg.d, n, ps)?;
            let fresh = digitlike_truth(cfg.levels, cfg.d, cfg.n_eval, ps.derive(stream::FRESH))?;
            let pred = meta_algorithm_with_mode(&data, h, b, cfg.pi, ps, cfg.mode)?;
            let report = calibration_report(&pred, &fresh)?;
            vec![mse_vs_truth(&pred, &fresh)?, report.max_gap]
        }
    })
}

/// Allowed MSE excess of the recalibrated predictor for a Lipschitz truth:
/// `3 (B^r / n + r / B^2)`.
pub fn no_harm_slack(b: usize, r: usize, n: usize) -> f64 {
    let bf = b as f64;
    3.0 * (bf.powi(r as i32) / n as f64 + r as f64 / (bf * bf))
}

/// Sorted `(n, b, seed)` keys of a config.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<(usize, usize, u64)> {
    let mut ns = cfg.n_grid.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut bs = if cfg.kind.uses_b() { cfg.b_grid.clone() } else { vec![0] };
    bs.sort_unstable();
    bs.dedup();
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let mut pts = Vec::with_capacity(ns.len() * bs.len() * seeds.len());
    for &n in &ns {
        for &b in &bs {
            for &s in &seeds {
                pts.push((n, b, s));
            }
        }
    }
    pts
}

/// Runs every point of the config on the rayon pool. Rows come back in
/// `(n, b, seed)` order whatever the scheduling.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let file_spec = load_spec(cfg)?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let setups: Vec<Setup> = seeds
        .par_iter()
        .map(|&s| setup(cfg, &file_spec, s).map_err(|e| context(e, &format!("setup for seed {s}"))))
        .collect::<Result<_>>()?;
    let by_seed: BTreeMap<u64, &Setup> = seeds.iter().copied().zip(setups.iter()).collect();
    let points = sweep_points(cfg);
    let rows: Vec<SweepRow> = points
        .par_iter()
        .map(|&(n, b, seed)| {
            run_point(cfg, by_seed[&seed], n, b, seed)
                .map(|values| SweepRow { n, b, seed, values })
                .map_err(|e| context(e, &format!("point n={n} b={b} seed={seed}")))
        })
        .collect::<Result<_>>()?;
    let summary = summarize(cfg, &rows);
    Ok(SweepResult {
        config: cfg.clone(),
        rows,
        summary,
    })
}

fn context(e: Error, what: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        other => Error::Config(format!("{what}: {other}")),
    }
}

fn summarize(cfg: &ExperimentConfig, rows: &[SweepRow]) -> SweepSummary {
    let kind = cfg.kind;
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for row in rows {
        let v = row.get(kind, kind.primary()).expect("primary column exists");
        let e = acc.entry((row.n, row.b)).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let means: Vec<CellMean> = acc
        .iter()
        .map(|(&(n, b), &(s, c))| CellMean {
            n,
            b,
            mean: s / c as f64,
            seeds: c,
        })
        .collect();
    let mut rate_fits = Vec::new();
    let mut bs: Vec<usize> = means.iter().map(|m| m.b).collect();
    bs.sort_unstable();
    bs.dedup();
    for b in bs {
        let pts: Vec<(f64, f64)> = means.iter().filter(|m| m.b == b).map(|m| (m.n as f64, m.mean)).collect();
        if let Ok(fit) = fit_rate(&pts) {
            rate_fits.push(BFit { b, fit });
        }
    }
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    SweepSummary {
        schema: SCHEMA_VERSION,
        kind,
        config_hash: cfg.hash(),
        seeds,
        rows: rows.len(),
        primary: kind.primary().to_string(),
        means,
        rate_fits,
    }
}

impl SweepResult {
    /// CSV with a `#` header line carrying schema, kind, config hash and
    /// seeds, then `n,b,seed,<columns>`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let kind = self.config.kind;
        let seeds: Vec<String> = self.summary.seeds.iter().map(|s| s.to_string()).collect();
        writeln!(
            out,
            "# schema={} kind={} config_hash={} seeds={}",
            SCHEMA_VERSION,
            kind.name(),
            self.summary.config_hash,
            seeds.join(";")
        )?;
        writeln!(out, "n,b,seed,{}", kind.columns().join(","))?;
        for row in &self.rows {
            let vals: Vec<String> = row.values.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{},{},{}", row.n, row.b, row.seed, vals.join(","))?;
        }
        Ok(())
    }

    /// Writes `results.csv` and `summary.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("results.csv"))?);
        self.write_csv(&mut f)?;
        f.flush()?;
        crate::io::write_json(&dir.join("summary.json"), &self.summary)
    }
}

/// Datasets described by a config: one per seed at the first grid size
/// (one per task and seed for transfer kinds), with the truth they were
/// drawn from when there is a single network.
/// A named dataset with the network and law that produced it, when known.
pub type GeneratedDataset = (String, Dataset, Option<MlpSpec>, Option<InputLaw>);

pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Vec<GeneratedDataset>> {
    cfg.validate()?;
    let file_spec = load_spec(cfg)?;
    let n = cfg.n_grid[0];
    let mut out = Vec::new();
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    for &seed in &seeds {
        let st = setup(cfg, &file_spec, seed)?;
        let ps = point_seed(seed, n);
        match st {
            Setup::Truth { spec, law, .. }
            | Setup::NoHarm { spec, law, .. }
            | Setup::Moment { spec, law, .. }
            | Setup::Projection { spec, law, .. } => {
                let data = sample_dataset(&spec, &law, n, ps)?;
                out.push((format!("data_seed{seed}"), data, Some(spec), Some(law)));
            }
            Setup::Transfer(family) => {
                let fam = family.with_n_per_task(n);
                for (t, data) in sample_transfer(&fam, ps)?.into_iter().enumerate() {
                    let task = &fam.tasks()[t];
                    out.push((format!("data_seed{seed}_task{t}"), data, Some(task.spec.clone()), Some(task.law.clone())));
                }
            }
            Setup::Digit { .. } => {
                out.push((format!("data_seed{seed}"), digitlike_truth(cfg.levels, cfg.d, n, ps)?, None, None));
            }
        }
    }
    Ok(out)
}
