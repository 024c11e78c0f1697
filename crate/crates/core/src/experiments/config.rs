use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::InputLaw;
use crate::error::{Error, Result};
use crate::scaffold::QuantileMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CalibrationRate,
    AccuracyVsBins,
    NoHarm,
    SymmetricMoment,
    GaussianMoment,
    ProjectionRate,
    TransferCovariate,
    TransferConcept,
    Digitlike,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::CalibrationRate,
        ExperimentKind::AccuracyVsBins,
        ExperimentKind::NoHarm,
        ExperimentKind::SymmetricMoment,
        ExperimentKind::GaussianMoment,
        ExperimentKind::ProjectionRate,
        ExperimentKind::TransferCovariate,
        ExperimentKind::TransferConcept,
        ExperimentKind::Digitlike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::CalibrationRate => "calibration_rate",
            ExperimentKind::AccuracyVsBins => "accuracy_vs_bins",
            ExperimentKind::NoHarm => "no_harm",
            ExperimentKind::SymmetricMoment => "symmetric_moment",
            ExperimentKind::GaussianMoment => "gaussian_moment",
            ExperimentKind::ProjectionRate => "projection_rate",
            ExperimentKind::TransferCovariate => "transfer_covariate",
            ExperimentKind::TransferConcept => "transfer_concept",
            ExperimentKind::Digitlike => "digitlike",
        }
    }
}

/// A fully resolved experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Dataset sizes (total, before splitting; per task for transfer kinds;
    /// Monte Carlo size for the identity kinds).
    pub n_grid: Vec<usize>,
    /// Branches per coordinate.
    pub b_grid: Vec<usize>,
    /// Representation dimension.
    pub r: usize,
    /// Input dimension.
    pub d: usize,
    /// Input dimensions cycled over seeds by the moment-identity kinds.
    pub dims: Vec<usize>,
    pub pi: f64,
    pub seeds: Vec<u64>,
    /// Fresh evaluation points per run.
    pub n_eval: usize,
    /// Tasks, for transfer kinds.
    pub tasks: usize,
    /// Levels, for the digit-like truth.
    pub levels: usize,
    /// Seed of the ground-truth network where it is shared across seeds.
    pub spec_seed: u64,
    /// Ground-truth network file, replacing the generated one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    /// Input law, replacing the kind's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<InputLaw>,
    pub mode: QuantileMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// User-facing config: only `kind` is required, everything else falls back
/// to the kind's preset.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    kind: ExperimentKind,
    n_grid: Option<Vec<usize>>,
    b_grid: Option<Vec<usize>>,
    r: Option<usize>,
    d: Option<usize>,
    dims: Option<Vec<usize>>,
    pi: Option<f64>,
    seeds: Option<Vec<u64>>,
    n_eval: Option<usize>,
    tasks: Option<usize>,
    levels: Option<usize>,
    spec_seed: Option<u64>,
    spec: Option<PathBuf>,
    law: Option<InputLaw>,
    mode: Option<QuantileMode>,
    out_dir: Option<PathBuf>,
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

impl ExperimentConfig {
    /// Default settings of each kind; these are the acceptance settings.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            kind,
            n_grid: vec![],
            b_grid: vec![1],
            r: 1,
            d: 1,
            dims: vec![],
            pi: crate::calibrate::DEFAULT_PI,
            seeds: seeds(20),
            n_eval: 100_000,
            tasks: 1,
            levels: 4,
            spec_seed: 0,
            spec: None,
            law: None,
            mode: QuantileMode::Conditional,
            out_dir: None,
        };
        match kind {
            ExperimentKind::CalibrationRate => ExperimentConfig {
                n_grid: (10..=16).map(|k| 1usize << k).collect(),
                b_grid: vec![4],
                r: 2,
                d: 4,
                ..base
            },
            ExperimentKind::AccuracyVsBins => ExperimentConfig {
                n_grid: vec![20_000],
                b_grid: (1..=12).collect(),
                r: 2,
                d: 2,
                ..base
            },
            ExperimentKind::NoHarm => ExperimentConfig {
                n_grid: vec![20_000],
                b_grid: vec![8],
                r: 2,
                d: 5,
                ..base
            },
            ExperimentKind::SymmetricMoment | ExperimentKind::GaussianMoment => ExperimentConfig {
                n_grid: vec![1_000_000],
                seeds: seeds(10),
                d: 5,
                dims: vec![2, 5],
                ..base
            },
            ExperimentKind::ProjectionRate => ExperimentConfig {
                n_grid: vec![1000, 2000, 4000, 8000, 16_000],
                d: 10,
                ..base
            },
            ExperimentKind::TransferCovariate | ExperimentKind::TransferConcept => ExperimentConfig {
                n_grid: vec![500, 1000, 2000, 4000, 5000, 8000],
                r: 3,
                d: 20,
                tasks: 20,
                ..base
            },
            ExperimentKind::Digitlike => ExperimentConfig {
                n_grid: vec![4000, 16_000],
                b_grid: vec![4, 8],
                d: 3,
                levels: 4,
                seeds: seeds(5),
                ..base
            },
        }
    }

    /// Parses a JSON config; errors name the offending field and line.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let p: PartialConfig = crate::io::from_json_str(text, origin)?;
        let mut c = Self::preset(p.kind);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = p.$f { c.$f = v; } )* };
        }
        take!(n_grid, b_grid, r, d, dims, pi, seeds, n_eval, tasks, levels, spec_seed, mode);
        c.spec = p.spec.or(c.spec);
        c.law = p.law.or(c.law);
        c.out_dir = p.out_dir.or(c.out_dir);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        // Relative spec paths are taken relative to the config file.
        if let (Some(spec), Some(dir)) = (&cfg.spec, path.parent()) {
            if spec.is_relative() {
                cfg.spec = Some(dir.join(spec));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Grids nonempty, seeds distinct, referenced files present.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return bad("n_grid must be nonempty and positive".into());
        }
        if self.b_grid.is_empty() || self.b_grid.contains(&0) {
            return bad("b_grid must be nonempty and positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return bad(format!("pi must lie in (0, 1), got {}", self.pi));
        }
        if self.r == 0 || self.d == 0 || self.r > self.d {
            return bad(format!("need 1 <= r <= d, got r = {}, d = {}", self.r, self.d));
        }
        if self.dims.contains(&0) {
            return bad("dims must be positive".into());
        }
        if self.n_eval == 0 {
            return bad("n_eval must be positive".into());
        }
        if matches!(self.kind, ExperimentKind::TransferCovariate | ExperimentKind::TransferConcept) && self.tasks < self.r {
            return bad(format!("transfer needs tasks >= r, got {} < {}", self.tasks, self.r));
        }
        if let Some(spec) = &self.spec {
            if !spec.exists() {
                return bad(format!("spec file {} does not exist", spec.display()));
            }
        }
        if let Some(law) = &self.law {
            if law.dim() != self.d {
                return bad(format!("law dimension {} differs from d = {}", law.dim(), self.d));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        crate::io::hash_of(&c)
    }
}
