//! Input distributions for synthetic data.
//!
//! Two symmetric compact-support laws (uniform box and a symmetrized truncated
//! Gaussian) and the Gaussian law. The truncated Gaussian is truncated in
//! whitened coordinates, `x = L z` with `z` a standard normal restricted to
//! `|z_i| <= c`, so its covariance is known in closed form:
//! `v(c) * Sigma` with `v(c) = 1 - 2 c phi(c) / (2 Phi(c) - 1)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawKind {
    /// Independent `Uniform[-c, c]` coordinates.
    UniformBox { c: f64 },
    /// `N(mean, cov)`; `mean` defaults to zero.
    Gaussian {
        cov: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f64>>,
    },
    /// `L z` with `z` standard normal truncated to `|z_i| <= c`, emitted in
    /// `(x, -x)` pairs.
    SymTruncGaussian { cov: Vec<Vec<f64>>, c: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LawFile", into = "LawFile")]
pub struct InputLaw {
    dim: usize,
    kind: LawKind,
    chol: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LawFile {
    dim: usize,
    #[serde(flatten)]
    kind: LawKind,
}

impl TryFrom<LawFile> for InputLaw {
    type Error = Error;
    fn try_from(f: LawFile) -> Result<Self> {
        let law = match f.kind {
            LawKind::UniformBox { c } => InputLaw::uniform_box(f.dim, c)?,
            kind => InputLaw::from_kind(kind)?,
        };
        if law.dim != f.dim {
            return Err(Error::InvalidLaw(format!("declared dim {} but kind implies {}", f.dim, law.dim)));
        }
        Ok(law)
    }
}

impl From<InputLaw> for LawFile {
    fn from(l: InputLaw) -> Self {
        LawFile { dim: l.dim, kind: l.kind }
    }
}

impl PartialEq for InputLaw {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.kind == other.kind
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidLaw("covariance must be a nonempty square matrix".into()));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (cov[(i, j)], cov[(j, i)]);
            if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::InvalidLaw("covariance is not symmetric".into()));
            }
        }
    }
    nalgebra::Cholesky::new(cov.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidLaw("covariance is not positive definite".into()))
}

/// Variance of a standard normal truncated to `[-c, c]`.
pub fn truncated_normal_variance(c: f64) -> f64 {
    let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = statrs::function::erf::erf(c / std::f64::consts::SQRT_2);
    1.0 - 2.0 * c * phi / mass
}

impl InputLaw {
    pub fn from_kind(kind: LawKind) -> Result<Self> {
        match &kind {
            LawKind::UniformBox { c } => Err(Error::InvalidLaw(format!(
                "uniform box needs an explicit dimension (c = {c}); use InputLaw::uniform_box"
            ))),
            LawKind::Gaussian { cov, mean } => {
                let m = matrix_from_rows(cov)?;
                if let Some(mu) = mean {
                    if mu.len() != m.nrows() || mu.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidLaw("mean has wrong length or non-finite entries".into()));
                    }
                }
                let chol = cholesky(&m)?;
                Ok(InputLaw {
                    dim: m.nrows(),
                    kind,
                    chol: Some(chol),
                })
            }
            LawKind::SymTruncGaussian { cov, c } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::InvalidLaw("truncation radius must be positive".into()));
                }
                let m = matrix_from_rows(cov)?;
                let chol = cholesky(&m)?;
                Ok(InputLaw {
                    dim: m.nrows(),
                    kind,
                    chol: Some(chol),
                })
            }
        }
    }

    pub fn uniform_box(dim: usize, c: f64) -> Result<Self> {
        if dim == 0 || !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidLaw("uniform box needs dim > 0 and c > 0".into()));
        }
        Ok(InputLaw {
            dim,
            kind: LawKind::UniformBox { c },
            chol: None,
        })
    }

    pub fn gaussian(cov: &DMatrix<f64>) -> Result<Self> {
        Self::from_kind(LawKind::Gaussian {
            cov: rows_from_matrix(cov),
            mean: None,
        })
    }

    pub fn gaussian_with_mean(cov: &DMatrix<f64>, mean: Vec<f64>) -> Result<Self> {
        Self::from_kind(LawKind::Gaussian {
            cov: rows_from_matrix(cov),
            mean: Some(mean),
        })
    }

    pub fn standard_gaussian(dim: usize) -> Result<Self> {
        Self::gaussian(&DMatrix::identity(dim, dim))
    }

    pub fn sym_trunc_gaussian(cov: &DMatrix<f64>, c: f64) -> Result<Self> {
        Self::from_kind(LawKind::SymTruncGaussian {
            cov: rows_from_matrix(cov),
            c,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &LawKind {
        &self.kind
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, LawKind::Gaussian { .. })
    }

    /// Mean vector (zero except for a shifted Gaussian).
    pub fn mean(&self) -> Vec<f64> {
        match &self.kind {
            LawKind::Gaussian { mean: Some(m), .. } => m.clone(),
            _ => vec![0.0; self.dim],
        }
    }

    /// Whether `density(x) == density(-x)`.
    pub fn is_symmetric(&self) -> bool {
        match &self.kind {
            LawKind::Gaussian { mean: Some(m), .. } => m.iter().all(|v| *v == 0.0),
            _ => true,
        }
    }

    /// Exact covariance matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            LawKind::UniformBox { c } => DMatrix::identity(self.dim, self.dim) * (c * c / 3.0),
            LawKind::Gaussian { cov, .. } => matrix_from_rows(cov).expect("validated"),
            LawKind::SymTruncGaussian { cov, c } => matrix_from_rows(cov).expect("validated") * truncated_normal_variance(*c),
        }
    }

    /// Checks `c1 <= lambda_min(Sigma) <= lambda_max(Sigma) <= c2`.
    pub fn check_eigen_bounds(&self, c1: f64, c2: f64) -> Result<()> {
        let eig = self.covariance().symmetric_eigen().eigenvalues;
        let lo = eig.min();
        let hi = eig.max();
        if lo < c1 || hi > c2 {
            return Err(Error::InvalidLaw(format!(
                "covariance eigenvalues [{lo:.4}, {hi:.4}] outside [{c1}, {c2}]"
            )));
        }
        Ok(())
    }

    /// Maximizer and minimizer of `direction . x` over a compact support.
    /// `None` for the Gaussian law.
    pub fn extreme_points(&self, direction: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let sign = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        let (plus, minus) = match &self.kind {
            LawKind::UniformBox { c } => {
                let p: Vec<f64> = direction.iter().map(|w| c * sign(*w)).collect();
                let m = p.iter().map(|v| -v).collect();
                (p, m)
            }
            LawKind::SymTruncGaussian { c, .. } => {
                // Maximize (L^T w) . z over the z-box, then map back.
                let l = self.chol.as_ref().expect("validated");
                let w = DVector::from_column_slice(direction);
                let lw = l.transpose() * w;
                let z = DVector::from_iterator(self.dim, lw.iter().map(|v| c * sign(*v)));
                let p: Vec<f64> = (l * z).iter().copied().collect();
                let m = p.iter().map(|v| -v).collect();
                (p, m)
            }
            LawKind::Gaussian { .. } => return None,
        };
        Some((plus, minus))
    }

    /// Draws `n` rows, row-major.
    pub fn sample(&self, n: usize, seed: Seed) -> Vec<f64> {
        let mut rng = seed.rng();
        let d = self.dim;
        let mut out = Vec::with_capacity(n * d);
        match &self.kind {
            LawKind::UniformBox { c } => {
                for _ in 0..n * d {
                    out.push(rng.random_range(-*c..*c));
                }
            }
            LawKind::Gaussian { mean, .. } => {
                let l = self.chol.as_ref().expect("validated");
                let mut z = vec![0.0; d];
                for _ in 0..n {
                    for zi in z.iter_mut() {
                        *zi = StandardNormal.sample(&mut rng);
                    }
                    for i in 0..d {
                        let mut v = mean.as_ref().map_or(0.0, |m| m[i]);
                        for (j, zj) in z.iter().enumerate().take(i + 1) {
                            v += l[(i, j)] * zj;
                        }
                        out.push(v);
                    }
                }
            }
            LawKind::SymTruncGaussian { c, .. } => {
                let l = self.chol.as_ref().expect("validated");
                let mut z = vec![0.0; d];
                let mut x = vec![0.0; d];
                while out.len() < n * d {
                    for zi in z.iter_mut() {
                        *zi = loop {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            if v.abs() <= *c {
                                break v;
                            }
                        };
                    }
                    for i in 0..d {
                        x[i] = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
                    }
                    out.extend_from_slice(&x);
                    if out.len() < n * d {
                        out.extend(x.iter().map(|v| -v));
                    }
                }
            }
        }
        out
    }

    /// One-line description for metadata sidecars.
    pub fn describe(&self) -> String {
        match &self.kind {
            LawKind::UniformBox { c } => format!("uniform_box(d={}, c={c})", self.dim),
            LawKind::Gaussian { mean: None, .. } => format!("gaussian(d={})", self.dim),
            LawKind::Gaussian { mean: Some(_), .. } => format!("gaussian_shifted(d={})", self.dim),
            LawKind::SymTruncGaussian { c, .. } => format!("sym_trunc_gaussian(d={}, c={c})", self.dim),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col_mean_cov(x: &[f64], d: usize) -> (Vec<f64>, DMatrix<f64>) {
        let n = x.len() / d;
        let mut mean = vec![0.0; d];
        for row in x.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for row in x.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]) / n as f64;
                }
            }
        }
        (mean, cov)
    }

    #[test]
    fn truncated_variance_limits() {
        assert!((truncated_normal_variance(50.0) - 1.0).abs() < 1e-12);
        // Uniform limit for a tiny window: c^2 / 3.
        let c = 1e-3;
        assert!((truncated_normal_variance(c) - c * c / 3.0).abs() < 1e-9);
        // Tabulated value for c = 1: 0.2911...
        assert!((truncated_normal_variance(1.0) - 0.291_125_7).abs() < 1e-6);
    }

    #[test]
    fn empirical_covariance_matches_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        for law in [
            InputLaw::uniform_box(2, 1.5).unwrap(),
            InputLaw::gaussian(&cov).unwrap(),
            InputLaw::sym_trunc_gaussian(&cov, 1.2).unwrap(),
        ] {
            let x = law.sample(200_000, Seed(3));
            let (_, emp) = col_mean_cov(&x, 2);
            let exact = law.covariance();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((emp[(i, j)] - exact[(i, j)]).abs() < 0.03, "{} {emp} vs {exact}", law.describe());
                }
            }
        }
    }

    #[test]
    fn truncated_emits_negation_pairs() {
        let law = InputLaw::sym_trunc_gaussian(&DMatrix::identity(3, 3), 2.0).unwrap();
        let x = law.sample(11, Seed(1));
        assert_eq!(x.len(), 33);
        for pair in x.chunks(6).filter(|c| c.len() == 6) {
            for k in 0..3 {
                assert_eq!(pair[k], -pair[k + 3]);
            }
        }
    }

    #[test]
    fn extreme_points_bound_the_support() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let law = InputLaw::sym_trunc_gaussian(&cov, 1.5).unwrap();
        let w = [0.7, -1.1];
        let (p, m) = law.extreme_points(&w).unwrap();
        let dot = |x: &[f64]| x[0] * w[0] + x[1] * w[1];
        let (hi, lo) = (dot(&p), dot(&m));
        let x = law.sample(50_000, Seed(8));
        for row in x.chunks(2) {
            let v = dot(row);
            assert!(v <= hi + 1e-12 && v >= lo - 1e-12);
        }
        assert!(InputLaw::standard_gaussian(2).unwrap().extreme_points(&w).is_none());
    }

    #[test]
    fn invalid_covariances_rejected() {
        let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(InputLaw::gaussian(&not_pd).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        assert!(InputLaw::gaussian(&asym).is_err());
    }

    #[test]
    fn eigen_bounds_and_symmetry() {
        let law = InputLaw::uniform_box(3, 1.0).unwrap();
        assert!(law.check_eigen_bounds(0.3, 0.4).is_ok());
        assert!(law.check_eigen_bounds(0.5, 1.0).is_err());
        let shifted = InputLaw::gaussian_with_mean(&DMatrix::identity(2, 2), vec![1.0, 0.0]).unwrap();
        assert!(!shifted.is_symmetric());
        assert!(law.is_symmetric());
    }

    #[test]
    fn serde_round_trip() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0]);
        for law in [
            InputLaw::uniform_box(4, 1.0).unwrap(),
            InputLaw::gaussian(&cov).unwrap(),
            InputLaw::sym_trunc_gaussian(&cov, 2.0).unwrap(),
        ] {
            let json = serde_json::to_string(&law).unwrap();
            let back: InputLaw = serde_json::from_str(&json).unwrap();
            assert_eq!(law, back);
            assert_eq!(law.sample(5, Seed(2)), back.sample(5, Seed(2)));
        }
    }
}
