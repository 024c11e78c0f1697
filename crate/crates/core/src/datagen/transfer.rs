//! Multi-task families sharing a first layer `W1` (rows orthonormal).
//!
//! Every task's network starts with the layer `u = W1 x` (identity
//! activation, no bias) followed by a task suffix `g_t`, so
//! `p*_t(x) = g_t(W1 x)`. Under covariate shift `g_t` is shared and the input
//! laws differ; under concept shift the law is shared and the suffixes differ.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::law::InputLaw;
use super::mlp::{Activation, Layer, MlpSpec};
use super::zoo::{clamp_for_law, clamp_for_laws, random_orthonormal_rows, sample_dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, Seed};

/// Families with `sigma_r(M) < DIVERSITY_FACTOR * sqrt(T)` are rejected,
/// where `M` is the `r x T` matrix of expected link gradients.
pub const DIVERSITY_FACTOR: f64 = 0.1;

/// Monte Carlo sample per task for the expected link gradient.
pub const GRADIENT_MC: usize = 4000;

/// Central finite-difference step for link gradients.
pub const FD_STEP: f64 = 1e-5;

/// Concept-shift suffix weights are uniform on `[-CONCEPT_WEIGHT, CONCEPT_WEIGHT]`.
pub const CONCEPT_WEIGHT: f64 = 6.0;

/// Covariate shift: the shared link is `sum_i sigmoid(COVARIATE_GAIN * u_i)`.
pub const COVARIATE_GAIN: f64 = 12.0;

/// Covariate shift: per-task variances of `W1 X` along each row of `W1`
/// are independently `COVARIATE_LOW` or `COVARIATE_HIGH`.
pub const COVARIATE_LOW: f64 = 0.03;
pub const COVARIATE_HIGH: f64 = 25.0;

const MAX_FAMILY_ATTEMPTS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    Covariate,
    Concept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTask {
    pub spec: MlpSpec,
    pub law: InputLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferTaskFamily {
    shift: Shift,
    w1: DMatrix<f64>,
    tasks: Vec<TransferTask>,
    n_per_task: usize,
}

fn w1_layer(w1: &DMatrix<f64>) -> Result<Layer> {
    let rows = (0..w1.nrows()).map(|i| w1.row(i).iter().copied().collect()).collect();
    Layer::unbiased(rows, Activation::Identity)
}

/// Max deviation of `W W^T` from the identity.
pub fn orthonormality_deviation(w: &DMatrix<f64>) -> f64 {
    (w * w.transpose() - DMatrix::identity(w.nrows(), w.nrows())).abs().max()
}

impl TransferTaskFamily {
    /// Validates the family: `W1` rows orthonormal, `T >= r`, each task's
    /// first layer equal to `W1`, shared link (covariate) or shared law
    /// (concept).
    pub fn new(shift: Shift, w1: DMatrix<f64>, tasks: Vec<TransferTask>, n_per_task: usize) -> Result<Self> {
        let (r, d) = w1.shape();
        let dev = orthonormality_deviation(&w1);
        if dev > 1e-8 {
            return Err(Error::NotOrthonormal { deviation: dev });
        }
        if tasks.len() < r {
            return Err(Error::param("T", format!("need at least r = {r} tasks, got {}", tasks.len())));
        }
        if n_per_task == 0 {
            return Err(Error::param("n_per_task", "must be positive"));
        }
        let first = w1_layer(&w1)?;
        for (t, task) in tasks.iter().enumerate() {
            if task.spec.input_dim() != d || task.law.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: format!("task {t} input"),
                    expected: d,
                    got: task.law.dim(),
                });
            }
            let l0 = &task.spec.layers()[0];
            if l0.out_dim() != r
                || l0.activation() != Activation::Identity
                || l0.bias().iter().any(|b| *b != 0.0)
                || l0.weights_flat().iter().zip(first.weights_flat()).any(|(a, b)| (a - b).abs() > 1e-12)
            {
                return Err(Error::InvalidSpec(format!("task {t} does not start with the shared W1 layer")));
            }
        }
        match shift {
            Shift::Covariate if tasks.iter().any(|t| t.spec != tasks[0].spec) => {
                return Err(Error::InvalidSpec("covariate shift needs one shared network".into()))
            }
            Shift::Concept if tasks.iter().any(|t| t.law != tasks[0].law) => {
                return Err(Error::InvalidLaw("concept shift needs one shared input law".into()))
            }
            _ => {}
        }
        Ok(TransferTaskFamily {
            shift,
            w1,
            tasks,
            n_per_task,
        })
    }

    /// Concept-shift family on `N(0, I_d)`. Task `t` has the suffix
    /// `c_t * sigmoid(a_t . u + b_t)` with `a_t` uniform on `[-6, 6]^r`,
    /// `b_t, c_t` uniform on `[-1, 1]`, clamped per task. Families failing the
    /// diversity check are redrawn.
    pub fn concept(d: usize, r: usize, t: usize, n_per_task: usize, seed: Seed) -> Result<Self> {
        let law = InputLaw::standard_gaussian(d)?;
        Self::redraw_until_diverse(seed, |attempt| {
            let w1 = random_orthonormal_rows(r, d, attempt.derive(stream::SPEC))?;
            let tasks = (0..t)
                .map(|k| {
                    let mut rng = attempt.derive2(stream::TASKS, k as u64).rng();
                    let a: Vec<f64> = (0..r).map(|_| rng.random_range(-CONCEPT_WEIGHT..=CONCEPT_WEIGHT)).collect();
                    let b = rng.random_range(-1.0..=1.0);
                    let c = rng.random_range(-1.0..=1.0);
                    let spec = MlpSpec::new(
                        d,
                        vec![
                            w1_layer(&w1)?,
                            Layer::new(vec![a], vec![b], Activation::Sigmoid)?,
                            Layer::unbiased(vec![vec![c]], Activation::Identity)?,
                        ],
                        CONCEPT_WEIGHT,
                        false,
                    )?;
                    let spec = clamp_for_law(&spec, &law, attempt.derive2(stream::CLAMP, k as u64))?;
                    Ok(TransferTask { spec, law: law.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            TransferTaskFamily::new(Shift::Concept, w1, tasks, n_per_task)
        })
    }

    /// Covariate-shift family. The shared link is
    /// `sum_i sigmoid(12 u_i)`, clamped on the pooled task laws. Task `t`
    /// draws `X ~ N(0, W1^T S_t W1 + (I - W1^T W1))` with `S_t` diagonal,
    /// entries independently 0.03 or 25.
    pub fn covariate(d: usize, r: usize, t: usize, n_per_task: usize, seed: Seed) -> Result<Self> {
        Self::redraw_until_diverse(seed, |attempt| {
            let w1 = random_orthonormal_rows(r, d, attempt.derive(stream::SPEC))?;
            let proj = w1.transpose() * &w1;
            let complement = DMatrix::<f64>::identity(d, d) - &proj;
            let laws = (0..t)
                .map(|k| {
                    let mut rng = attempt.derive2(stream::LAW, k as u64).rng();
                    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(r, |_, _| {
                        if rng.random_bool(0.5) {
                            COVARIATE_LOW
                        } else {
                            COVARIATE_HIGH
                        }
                    }));
                    let mut cov = w1.transpose() * s * &w1 + &complement;
                    cov = (&cov + cov.transpose()) * 0.5;
                    InputLaw::gaussian(&cov)
                })
                .collect::<Result<Vec<_>>>()?;
            let gain = DMatrix::<f64>::identity(r, r) * COVARIATE_GAIN;
            let spec = MlpSpec::new(
                d,
                vec![
                    w1_layer(&w1)?,
                    Layer::unbiased((0..r).map(|i| gain.row(i).iter().copied().collect()).collect(), Activation::Sigmoid)?,
                    Layer::unbiased(vec![vec![1.0; r]], Activation::Identity)?,
                ],
                COVARIATE_GAIN,
                false,
            )?;
            let spec = clamp_for_laws(&spec, &laws, attempt.derive(stream::CLAMP))?;
            let tasks = laws
                .into_iter()
                .map(|law| TransferTask { spec: spec.clone(), law })
                .collect();
            TransferTaskFamily::new(Shift::Covariate, w1, tasks, n_per_task)
        })
    }

    fn redraw_until_diverse<F>(seed: Seed, mut draw: F) -> Result<Self>
    where
        F: FnMut(Seed) -> Result<Self>,
    {
        let mut best = 0.0;
        for attempt in 0..MAX_FAMILY_ATTEMPTS {
            let s = if attempt == 0 { seed } else { seed.derive2(stream::SPEC, attempt) };
            let family = draw(s)?;
            let div = family.diversity(GRADIENT_MC, s.derive(stream::FRESH));
            if div >= DIVERSITY_FACTOR {
                return Ok(family);
            }
            log::debug!("transfer family attempt {attempt} rejected: sigma_r/sqrt(T) = {div:.4}");
            best = f64::max(best, div);
        }
        Err(Error::InvalidSpec(format!(
            "no diverse family in {MAX_FAMILY_ATTEMPTS} draws (best sigma_r/sqrt(T) = {best:.4})"
        )))
    }

    pub fn shift(&self) -> Shift {
        self.shift
    }

    /// Shared first layer, `r x d`.
    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn tasks(&self) -> &[TransferTask] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn r(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_per_task(&self) -> usize {
        self.n_per_task
    }

    pub fn with_n_per_task(mut self, n: usize) -> Self {
        self.n_per_task = n.max(1);
        self
    }

    /// `r x T` matrix whose column `t` is a Monte Carlo estimate of
    /// `E[grad g_t(W1 X)]` under task `t`'s law, by central differences.
    pub fn gradient_matrix(&self, n_mc: usize, seed: Seed) -> DMatrix<f64> {
        let r = self.r();
        let cols: Vec<Vec<f64>> = self
            .tasks
            .par_iter()
            .enumerate()
            .map(|(t, task)| {
                let x = task.law.sample(n_mc, seed.derive2(stream::TASKS, t as u64));
                let mut acc = vec![0.0; r];
                for row in x.chunks_exact(self.d()) {
                    let u = task.spec.first_layer_projection(row).expect("validated dims");
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += link_partial(&task.spec, &u, i);
                    }
                }
                acc.iter().map(|a| a / n_mc as f64).collect()
            })
            .collect();
        DMatrix::from_fn(r, self.tasks.len(), |i, t| cols[t][i])
    }

    /// `sigma_r(M) / sqrt(T)` for the gradient matrix `M`.
    pub fn diversity(&self, n_mc: usize, seed: Seed) -> f64 {
        let m = self.gradient_matrix(n_mc, seed);
        match crate::represent::thin_svd(&m) {
            Ok((_, sv, _)) => sv[self.r() - 1] / (self.tasks.len() as f64).sqrt(),
            Err(_) => f64::NAN,
        }
    }
}

/// Central difference of the link function along coordinate `i`.
pub fn link_partial(spec: &MlpSpec, u: &[f64], i: usize) -> f64 {
    let mut up = u.to_vec();
    let mut dn = u.to_vec();
    up[i] += FD_STEP;
    dn[i] -= FD_STEP;
    let f = |v: &[f64]| spec.eval_link(v).expect("validated dims");
    (f(&up) - f(&dn)) / (2.0 * FD_STEP)
}

/// One dataset per task; task `t` is `sample_dataset` with the seed
/// `seed.derive2(stream::TASKS, t)`.
pub fn sample_transfer(family: &TransferTaskFamily, seed: Seed) -> Result<Vec<Dataset>> {
    family
        .tasks
        .par_iter()
        .enumerate()
        .map(|(t, task)| sample_dataset(&task.spec, &task.law, family.n_per_task, task_seed(seed, t)))
        .collect()
}

pub fn task_seed(seed: Seed, t: usize) -> Seed {
    seed.derive2(stream::TASKS, t as u64)
}
