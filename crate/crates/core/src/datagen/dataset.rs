//! Feature matrix with binary labels and optional ground truth.
//!
//! On disk a dataset is a CSV with header `x0,...,x{d-1},y[,p_star]` plus a
//! JSON sidecar (`<file>.meta.json`) recording provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    n: usize,
    d: usize,
    y: Vec<u8>,
    p_star: Option<Vec<f64>>,
    seed: Seed,
}

/// Provenance sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Seed,
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub spec_hash: Option<String>,
    #[serde(default)]
    pub law: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl Dataset {
    /// `x` is row-major `n x d`.
    pub fn new(x: Vec<f64>, d: usize, y: Vec<u8>, p_star: Option<Vec<f64>>, seed: Seed) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDataset("feature dimension must be positive".into()));
        }
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        if x.len() != n * d {
            return Err(Error::DimensionMismatch {
                context: "feature matrix".into(),
                expected: n * d,
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite feature in row {}", i / d)));
        }
        if let Some(i) = y.iter().position(|v| *v > 1) {
            return Err(Error::InvalidDataset(format!("label in row {i} is not 0/1")));
        }
        if let Some(p) = &p_star {
            if p.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "p_star".into(),
                    expected: n,
                    got: p.len(),
                });
            }
            if let Some(i) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidDataset(format!("p_star in row {i} outside [0,1]")));
            }
        }
        Ok(Dataset {
            x,
            n,
            d,
            y,
            p_star,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.x.chunks_exact(self.d)
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    pub fn label(&self, i: usize) -> f64 {
        f64::from(self.y[i])
    }

    pub fn p_star(&self) -> Option<&[f64]> {
        self.p_star.as_deref()
    }

    pub fn label_mean(&self) -> f64 {
        self.y.iter().map(|v| f64::from(*v)).sum::<f64>() / self.n as f64
    }

    /// Rows at `indices`, in that order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let mut x = Vec::with_capacity(indices.len() * self.d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        let p = self.p_star.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect());
        Dataset::new(x, self.d, y, p, self.seed)
    }

    pub fn with_seed(mut self, seed: Seed) -> Self {
        self.seed = seed;
        self
    }

    /// Stacks datasets of equal dimension.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("no datasets to concatenate"))?;
        let d = first.d;
        let keep_truth = parts.iter().all(|p| p.p_star.is_some());
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut ps = Vec::new();
        for p in parts {
            if p.d != d {
                return Err(Error::DimensionMismatch {
                    context: "dataset concat".into(),
                    expected: d,
                    got: p.d,
                });
            }
            x.extend_from_slice(&p.x);
            y.extend_from_slice(&p.y);
            if keep_truth {
                ps.extend_from_slice(p.p_star.as_ref().unwrap());
            }
        }
        Dataset::new(x, d, y, keep_truth.then_some(ps), first.seed)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            seed: self.seed,
            n: self.n,
            d: self.d,
            spec_hash: None,
            law: None,
            config_hash: None,
        }
    }

    pub fn sidecar_path(csv: &Path) -> PathBuf {
        let mut s = csv.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.d).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        if self.p_star.is_some() {
            header.push("p_star".into());
        }
        w.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n {
            rec.clear();
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            rec.push(self.y[i].to_string());
            if let Some(p) = &self.p_star {
                rec.push(p[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the CSV and its sidecar.
    pub fn save(&self, path: &Path, meta: &DatasetMeta) -> Result<()> {
        self.write_csv(path)?;
        std::fs::write(Self::sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
        Ok(())
    }

    /// Reads a CSV; the seed comes from the sidecar when one exists.
    pub fn load(path: &Path) -> Result<Dataset> {
        let side = Self::sidecar_path(path);
        let seed = if side.exists() {
            let meta: DatasetMeta = crate::io::read_json(&side)?;
            meta.seed
        } else {
            Seed(0)
        };
        Self::read_csv(path, seed)
    }

    pub fn read_csv(path: &Path, seed: Seed) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let y_at = cols
            .iter()
            .position(|c| *c == "y")
            .ok_or_else(|| Error::InvalidDataset(format!("{}: header has no `y` column", path.display())))?;
        for (j, c) in cols[..y_at].iter().enumerate() {
            if *c != format!("x{j}") {
                return Err(Error::InvalidDataset(format!(
                    "{}: expected column x{j}, found `{c}`",
                    path.display()
                )));
            }
        }
        let d = y_at;
        let has_p = match &cols[y_at + 1..] {
            [] => false,
            ["p_star"] => true,
            other => {
                return Err(Error::InvalidDataset(format!(
                    "{}: unexpected trailing columns {other:?}",
                    path.display()
                )))
            }
        };
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut p = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        path: format!("{}:{}:{}", path.display(), line + 2, cols[k]),
                        message: "not a number".into(),
                    })
            };
            for k in 0..d {
                x.push(parse(k)?);
            }
            let label = parse(y_at)?;
            if label != 0.0 && label != 1.0 {
                return Err(Error::Parse {
                    path: format!("{}:{}:y", path.display(), line + 2),
                    message: format!("label {label} is not 0/1"),
                });
            }
            y.push(label as u8);
            if has_p {
                p.push(parse(y_at + 1)?);
            }
        }
        Dataset::new(x, d, y, has_p.then_some(p), seed)
    }
}
