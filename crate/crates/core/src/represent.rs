//! Learning the first layer from data.
//!
//! Single task: the OLS coefficient of `y` on `x` is proportional to
//! `Sigma W1^T` (symmetric laws with a bias-free ReLU network, or Gaussian
//! laws through Stein's identity). Several tasks: stacking the per-task
//! coefficients and keeping the top-`r` left singular vectors recovers the
//! row space of `W1`, measured up to rotation by [`procrustes_distance`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{link_partial, Dataset, InputLaw, LawKind, MlpSpec};
use crate::error::{Error, Result};
use crate::rng::Seed;

/// Largest accepted condition number of the empirical second-moment matrix.
pub const MAX_CONDITION: f64 = 1e10;

/// `sigma_r(B) / sqrt(T)` below this flags a rank-deficient task family.
pub const RANK_WARNING: f64 = 1e-6;

/// `|E[g'(W1 X)]|` below this flags a near-zero Stein constant.
pub const GAMMA_WARNING: f64 = 1e-3;

/// Tolerance for row orthonormality of subspace bases.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

const MC_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    /// Condition number of `X^T X`.
    pub gram_condition: f64,
    pub n_used: usize,
}

/// Least squares `argmin |y - X beta|` by Householder QR; `x` is `n x d`
/// row-major. The Gram matrix is never formed.
pub fn ols(x: &[f64], d: usize, y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    if d == 0 || x.len() != n * d {
        return Err(Error::DimensionMismatch {
            context: "design matrix".into(),
            expected: n * d,
            got: x.len(),
        });
    }
    if n <= d {
        return Err(Error::InsufficientSamples { needed: d + 1, got: n });
    }
    let xm = DMatrix::from_row_slice(n, d, x);
    let qr = xm.qr();
    let r = qr.r();
    let (_, sv, _) = thin_svd(&r)?;
    let smax = sv[0];
    let smin = sv[d - 1];
    let condition = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let mut qty = DVector::from_column_slice(y);
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, d).into_owned();
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or(Error::IllConditioned { condition })?;
    Ok(OlsFit {
        beta: beta.iter().copied().collect(),
        gram_condition: condition,
        n_used: n,
    })
}

/// OLS of the 0/1 labels on the features.
pub fn ols_dataset(data: &Dataset) -> Result<OlsFit> {
    let y: Vec<f64> = (0..data.len()).map(|i| data.label(i)).collect();
    ols(data.features(), data.dim(), &y)
}

/// `(|X^T (y - X beta)|, |X^T y|)`, the normal-equation residual and its
/// scale.
pub fn normal_residual(x: &[f64], d: usize, y: &[f64], beta: &[f64]) -> (f64, f64) {
    let mut res = vec![0.0; d];
    let mut xty = vec![0.0; d];
    for (row, yi) in x.chunks_exact(d).zip(y) {
        let e = yi - row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..d {
            res[j] += row[j] * e;
            xty[j] += row[j] * yi;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (norm(&res), norm(&xty))
}

/// `(beta_hat - beta)^T Sigma (beta_hat - beta)`: the mean squared error of
/// the linear representation `x -> beta_hat . x` against `x -> beta . x`
/// under a law with second moment `Sigma`.
pub fn projection_error(beta_hat: &[f64], beta: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let diff = DVector::from_iterator(beta.len(), beta_hat.iter().zip(beta).map(|(a, b)| a - b));
    (diff.transpose() * sigma * &diff)[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPath {
    /// Symmetric law, bias-free ReLU network: `E[p* X] = q(1)/2 Sigma W1^T`.
    Symmetric,
    /// Gaussian law: `E[p* (X - mu)] = Sigma W1^T E[grad g(W1 X)]`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub path: MomentPath,
    /// Monte Carlo estimate of `E[p*(X) (X - mu)]`.
    pub mc: Vec<f64>,
    /// Closed-form right-hand side (for the Gaussian path, built from the
    /// Monte Carlo mean gradient on the same sample).
    pub closed_form: Vec<f64>,
    /// Standard error of `mc - closed_form`, per coordinate.
    pub diff_se: Vec<f64>,
    /// `q(1)` (symmetric path) or the mean link gradient (Gaussian path).
    pub gamma: Vec<f64>,
    pub near_singular_gamma: bool,
    pub n_mc: usize,
}

impl MomentEstimate {
    /// `max_j |mc_j - closed_j| / se_j`.
    pub fn max_z(&self) -> f64 {
        self.mc
            .iter()
            .zip(&self.closed_form)
            .zip(&self.diff_se)
            .map(|((a, b), s)| (a - b).abs() / s.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.mc
            .iter()
            .zip(&self.closed_form)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-coordinate mean and standard error of `f(x)` over independent
/// units. Each unit is one sample, or an `(x, -x)` pair for the
/// symmetrized truncated Gaussian (whose draws come in pairs).
fn mc_mean_se<F>(law: &InputLaw, n_mc: usize, seed: Seed, dim: usize, f: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let d = law.dim();
    let paired = matches!(law.kind(), LawKind::SymTruncGaussian { .. });
    let unit = if paired { 2 } else { 1 };
    let n_units = n_mc / unit;
    let x = law.sample(n_units * unit, seed);
    let chunk_rows = MC_CHUNK * unit;
    let partial: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(chunk_rows * d)
        .map(|block| {
            let mut s = vec![0.0; dim];
            let mut s2 = vec![0.0; dim];
            let mut acc = vec![0.0; dim];
            let mut tmp = vec![0.0; dim];
            for u in block.chunks_exact(unit * d) {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for row in u.chunks_exact(d) {
                    f(row, &mut tmp);
                    for (a, t) in acc.iter_mut().zip(&tmp) {
                        *a += t / unit as f64;
                    }
                }
                for j in 0..dim {
                    s[j] += acc[j];
                    s2[j] += acc[j] * acc[j];
                }
            }
            (s, s2)
        })
        .collect();
    let mut s = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for (a, b) in &partial {
        for j in 0..dim {
            s[j] += a[j];
            s2[j] += b[j];
        }
    }
    let m = n_units as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / m).collect();
    let se = s2
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q / m - mu * mu).max(0.0) * m / (m - 1.0) / m).sqrt())
        .collect();
    (mean, se)
}

/// Monte Carlo `E[p*(X) (X - mu)]` with per-coordinate standard errors.
pub fn moment_mc(spec: &MlpSpec, law: &InputLaw, n_mc: usize, seed: Seed) -> Result<(Vec<f64>, Vec<f64>)> {
    check_spec_law(spec, law, n_mc)?;
    let mu = law.mean();
    Ok(mc_mean_se(law, n_mc, seed, law.dim(), |x, out| {
        let p = spec.eval(x).expect("validated dims");
        for (j, o) in out.iter_mut().enumerate() {
            *o = p * (x[j] - mu[j]);
        }
    }))
}

fn check_spec_law(spec: &MlpSpec, law: &InputLaw, n_mc: usize) -> Result<()> {
    if spec.input_dim() != law.dim() {
        return Err(Error::DimensionMismatch {
            context: "law dimension vs spec input".into(),
            expected: spec.input_dim(),
            got: law.dim(),
        });
    }
    if n_mc < 4 {
        return Err(Error::InsufficientSamples { needed: 4, got: n_mc });
    }
    Ok(())
}

/// Symmetric path: compares the Monte Carlo moment with `q(1)/2 Sigma W1^T`.
pub fn symmetric_moment(spec: &MlpSpec, law: &InputLaw, n_mc: usize, seed: Seed) -> Result<MomentEstimate> {
    check_spec_law(spec, law, n_mc)?;
    if !law.is_symmetric() {
        return Err(Error::NonSymmetricLaw);
    }
    let q1 = spec.homogeneous_gain()?;
    let w1 = spec.layers()[0].row(0);
    let sigma = law.covariance();
    let sw = &sigma * DVector::from_column_slice(w1);
    let closed: Vec<f64> = sw.iter().map(|v| 0.5 * q1 * v).collect();
    let (mc, se) = moment_mc(spec, law, n_mc, seed)?;
    Ok(MomentEstimate {
        path: MomentPath::Symmetric,
        mc,
        closed_form: closed,
        diff_se: se,
        gamma: vec![q1],
        near_singular_gamma: q1.abs() < GAMMA_WARNING,
        n_mc,
    })
}

/// Gaussian path: compares the Monte Carlo moment with
/// `Sigma W1^T E[grad g(W1 X)]`, the gradient taken by central differences.
pub fn gaussian_moment(spec: &MlpSpec, law: &InputLaw, n_mc: usize, seed: Seed) -> Result<MomentEstimate> {
    check_spec_law(spec, law, n_mc)?;
    if !law.is_gaussian() {
        return Err(Error::InvalidLaw("the Stein path needs a Gaussian law".into()));
    }
    let d = law.dim();
    let first = &spec.layers()[0];
    let k = first.out_dim();
    let w1 = DMatrix::from_row_slice(k, d, first.weights_flat());
    let sigma = law.covariance();
    let a = &sigma * w1.transpose(); // d x k
    let mu = law.mean();
    // Per sample: [p*(x)(x - mu) - A grad g(W1 x), grad g(W1 x)].
    let (mean, se) = mc_mean_se(law, n_mc, seed, d + k, |x, out| {
        let p = spec.eval(x).expect("validated dims");
        let u = spec.first_layer_projection(x).expect("validated dims");
        let grad: Vec<f64> = (0..k).map(|i| link_partial(spec, &u, i)).collect();
        for j in 0..d {
            let ag: f64 = (0..k).map(|i| a[(j, i)] * grad[i]).sum();
            out[j] = p * (x[j] - mu[j]) - ag;
        }
        out[d..].copy_from_slice(&grad);
    });
    let gamma: Vec<f64> = mean[d..].to_vec();
    let closed: Vec<f64> = (0..d).map(|j| (0..k).map(|i| a[(j, i)] * gamma[i]).sum()).collect();
    let mc: Vec<f64> = (0..d).map(|j| mean[j] + closed[j]).collect();
    let gnorm = gamma.iter().map(|g| g * g).sum::<f64>().sqrt();
    let near = gnorm < GAMMA_WARNING;
    if near {
        log::warn!("mean link gradient {gnorm:.2e} is near zero; the first layer is poorly identified");
    }
    Ok(MomentEstimate {
        path: MomentPath::Gaussian,
        mc,
        closed_form: closed,
        diff_se: se[..d].to_vec(),
        gamma,
        near_singular_gamma: near,
        n_mc,
    })
}

/// Chooses the symmetric path for bias-free single-unit ReLU networks and
/// the Gaussian path otherwise.
pub fn stein_moment_oracle(spec: &MlpSpec, law: &InputLaw, n_mc: usize, seed: Seed) -> Result<MomentEstimate> {
    if spec.homogeneous_gain().is_ok() {
        symmetric_moment(spec, law, n_mc, seed)
    } else {
        gaussian_moment(spec, law, n_mc, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceEstimate {
    /// `r x d`, row-major, orthonormal rows.
    pub w_hat: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub r: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub conditions: Vec<f64>,
    pub rank_deficient: bool,
}

impl SubspaceEstimate {
    pub fn w_hat_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.r, self.d, &self.w_hat)
    }
}

/// Thin SVD `(U, sigma, V)` with singular values in nonincreasing order.
/// Delegated to `faer`: nalgebra 0.33/0.34 return inaccurate factors for
/// some small matrices with clustered singular values.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let a = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let svd = a
        .thin_svd()
        .map_err(|e| Error::param("matrix", format!("SVD did not converge: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let sv = svd.S().column_vector().iter().copied().collect();
    Ok((
        DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        sv,
        DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)]),
    ))
}

/// Top-`r` left singular vectors of `[beta_1, ..., beta_T]`.
pub fn subspace_from_betas(betas: &[Vec<f64>], r: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let t = betas.len();
    let d = betas.first().map_or(0, Vec::len);
    if t == 0 || d == 0 {
        return Err(Error::Empty("coefficient matrix"));
    }
    if r == 0 || r > d.min(t) {
        return Err(Error::param("r", format!("need 1 <= r <= min(d, T) = {}", d.min(t))));
    }
    let b = DMatrix::from_fn(d, t, |i, j| betas[j][i]);
    let (u, sv, _) = thin_svd(&b)?;
    let w = DMatrix::from_fn(r, d, |i, j| u[(j, i)]);
    Ok((w, sv))
}

/// Per-task OLS, stacked and reduced to the top-`r` left singular vectors.
pub fn multitask_subspace(tasks: &[Dataset], r: usize) -> Result<SubspaceEstimate> {
    if tasks.len() < r {
        return Err(Error::param("T", format!("need at least r = {r} tasks, got {}", tasks.len())));
    }
    let fits = tasks.par_iter().map(ols_dataset).collect::<Result<Vec<_>>>()?;
    let betas: Vec<Vec<f64>> = fits.iter().map(|f| f.beta.clone()).collect();
    let (w, sv) = subspace_from_betas(&betas, r)?;
    let t = tasks.len();
    let rank_deficient = sv[r - 1] / (t as f64).sqrt() < RANK_WARNING;
    if rank_deficient {
        log::warn!("stacked coefficients are rank deficient: sigma_r / sqrt(T) = {:.2e}", sv[r - 1] / (t as f64).sqrt());
    }
    Ok(SubspaceEstimate {
        w_hat: w.transpose().iter().copied().collect(),
        singular_values: sv,
        r,
        d: w.ncols(),
        t,
        conditions: fits.iter().map(|f| f.gram_condition).collect(),
        rank_deficient,
    })
}

fn check_orthonormal(w: &DMatrix<f64>) -> Result<()> {
    let dev = crate::datagen::orthonormality_deviation(w);
    if dev > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal { deviation: dev });
    }
    Ok(())
}

/// `min_O |O W_hat - W|_F` over orthogonal `O`, and the same value from the
/// singular values of `W W_hat^T` (`sqrt(2r - 2 sum sigma_i)`).
pub fn procrustes_with_check(w_hat: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<(f64, f64)> {
    if w_hat.shape() != w.shape() {
        return Err(Error::DimensionMismatch {
            context: "procrustes inputs".into(),
            expected: w.len(),
            got: w_hat.len(),
        });
    }
    check_orthonormal(w_hat)?;
    check_orthonormal(w)?;
    let m = w * w_hat.transpose();
    let (u, sv, v) = thin_svd(&m)?;
    let o = u * v.transpose();
    let dist = (o * w_hat - w).norm();
    let r = w.nrows() as f64;
    let via_trace = (2.0 * r - 2.0 * sv.iter().sum::<f64>()).max(0.0).sqrt();
    Ok((dist, via_trace))
}

pub fn procrustes_distance(w_hat: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    let (dist, via_trace) = procrustes_with_check(w_hat, w)?;
    debug_assert!((dist * dist - via_trace * via_trace).abs() < 1e-8, "{dist} vs {via_trace}");
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Activation, Layer};

    #[test]
    fn exact_interpolation() {
        let mut rng = Seed(3).rng();
        use rand::Rng as _;
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.chunks(2).map(|r| 2.0 * r[0] - r[1]).collect();
        let fit = ols(&x, 2, &y).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-8 && (fit.beta[1] + 1.0).abs() < 1e-8);
        let (res, scale) = normal_residual(&x, 2, &y, &fit.beta);
        assert!(res <= 1e-8 * scale);
    }

    #[test]
    fn orthogonal_response() {
        // Columns (1,1,0,0) and (0,0,1,1); y = (1,-1,1,-1) is orthogonal to both.
        let x = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let fit = ols(&x, 2, &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!(fit.beta.iter().all(|b| b.abs() < 1e-14));
    }

    #[test]
    fn singular_design() {
        let x = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(matches!(ols(&x, 2, &[1.0, 2.0, 3.0]), Err(Error::IllConditioned { .. })));
        assert!(matches!(ols(&x[..4], 2, &[1.0, 2.0]), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn procrustes_basics() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(procrustes_distance(&w, &w).unwrap(), 0.0);
        let w2 = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert!((procrustes_distance(&w2, &w).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let flipped = -&w;
        assert!(procrustes_distance(&flipped, &w).unwrap() < 1e-12);
        let bad = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        assert!(matches!(procrustes_distance(&bad, &w), Err(Error::NotOrthonormal { .. })));
    }

    #[test]
    fn symmetric_svd_direction() {
        // Two orthogonal unit betas alone give B = I (no unique top direction);
        // adding their sum makes B B^T = [[2, 1], [1, 2]] with top eigenvector
        // (1, 1)/sqrt(2) and eigenvalue 3.
        let (w, sv) = subspace_from_betas(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], 1).unwrap();
        assert!((w[(0, 0)].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((w[(0, 1)].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((sv[0] - 3f64.sqrt()).abs() < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_sixth() {
        let l1 = Layer::unbiased(vec![vec![1.0, 0.0]], Activation::Relu).unwrap();
        let l2 = Layer::unbiased(vec![vec![1.0]], Activation::Identity).unwrap();
        let spec = MlpSpec::new(2, vec![l1, l2], 1.0, true).unwrap();
        let law = InputLaw::uniform_box(2, 1.0).unwrap();
        let est = stein_moment_oracle(&spec, &law, 200_000, Seed(1)).unwrap();
        assert_eq!(est.path, MomentPath::Symmetric);
        assert!((est.closed_form[0] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(est.closed_form[1], 0.0);
        assert!((est.mc[0] - 1.0 / 6.0).abs() < 0.005);
    }

    #[test]
    fn shifted_gaussian_rejected_on_symmetric_path() {
        let l1 = Layer::unbiased(vec![vec![1.0]], Activation::Relu).unwrap();
        let l2 = Layer::unbiased(vec![vec![1.0]], Activation::Identity).unwrap();
        let spec = MlpSpec::new(1, vec![l1, l2], 1.0, true).unwrap();
        let law = InputLaw::gaussian_with_mean(&DMatrix::identity(1, 1), vec![1.0]).unwrap();
        assert!(matches!(symmetric_moment(&spec, &law, 100, Seed(0)), Err(Error::NonSymmetricLaw)));
    }
}
