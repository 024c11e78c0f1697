//! Calibration and accuracy measurement.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{bucket_of, num_buckets, BinnedPredictor, GroupCollection, Predictor};
use crate::datagen::{bernoulli_labels, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, Seed};

/// Largest domain accepted by [`exact_calibration_enumerable`].
pub const MAX_DOMAIN: usize = 10_000;

/// Residual statistics of one slice: a cell of a partition, or a
/// (group, value bucket) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStat {
    /// Cell id, or group index.
    pub group: usize,
    /// Value bucket, for group reports.
    pub bucket: Option<usize>,
    pub count: usize,
    /// Mean of `y - p_hat` over the slice.
    pub mean_residual: f64,
    pub gap: f64,
    /// Standard error of `mean_residual`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub per_cell: Vec<SliceStat>,
    /// Slices with no fresh points; not part of `max_gap`.
    pub excluded: Vec<usize>,
    pub max_gap: f64,
    pub alpha_hat: f64,
    pub n_eval: usize,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    s: f64,
    s2: f64,
}

impl Acc {
    fn add(&mut self, e: f64) {
        self.n += 1;
        self.s += e;
        self.s2 += e * e;
    }

    fn stat(&self, group: usize, bucket: Option<usize>) -> SliceStat {
        let n = self.n as f64;
        let mean = self.s / n;
        let var = if self.n > 1 {
            ((self.s2 - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        SliceStat {
            group,
            bucket,
            count: self.n,
            mean_residual: mean,
            gap: mean.abs(),
            se: (var / n).sqrt(),
        }
    }
}

fn finish(per_cell: Vec<SliceStat>, excluded: Vec<usize>, n_eval: usize) -> CalibrationReport {
    let max_gap = per_cell.iter().map(|s| s.gap).fold(0.0, f64::max);
    CalibrationReport {
        per_cell,
        excluded,
        max_gap,
        alpha_hat: max_gap,
        n_eval,
    }
}

/// Per-cell residuals of a binned predictor on fresh data. The predictor
/// is constant on each cell, so each cell is a single slice.
pub fn calibration_report(predictor: &BinnedPredictor, fresh: &Dataset) -> Result<CalibrationReport> {
    if fresh.is_empty() {
        return Err(Error::Empty("fresh evaluation data"));
    }
    let k = predictor.partition().k();
    let cells = predictor.partition().assign_rows(predictor.repr(), fresh.features());
    let mut acc = vec![Acc::default(); k];
    for (i, &c) in cells.iter().enumerate() {
        acc[c].add(fresh.label(i) - predictor.cell_value(c));
    }
    let mut per_cell = Vec::new();
    let mut excluded = Vec::new();
    for (c, a) in acc.iter().enumerate() {
        if a.n == 0 {
            excluded.push(c);
        } else {
            per_cell.push(a.stat(c, None));
        }
    }
    Ok(finish(per_cell, excluded, fresh.len()))
}

/// Residuals over (group, value bucket) slices for a general predictor.
/// `excluded` lists groups with no fresh members.
pub fn calibration_report_groups<P: Predictor + ?Sized>(
    predictor: &P,
    groups: &GroupCollection,
    fresh: &Dataset,
    lambda: f64,
) -> Result<CalibrationReport> {
    if fresh.is_empty() {
        return Err(Error::Empty("fresh evaluation data"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::param("lambda", "must lie in (0, 1]"));
    }
    let nb = num_buckets(lambda);
    let rows: Vec<&[f64]> = fresh.rows().collect();
    let preds: Vec<f64> = rows.par_iter().map(|x| predictor.predict(x)).collect();
    let mut acc: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    for (i, x) in rows.iter().enumerate() {
        let b = bucket_of(preds[i], lambda);
        let e = fresh.label(i) - preds[i];
        for (g, grp) in groups.groups().iter().enumerate() {
            if grp.contains(x) {
                acc.entry((g, b)).or_default().add(e);
            }
        }
    }
    let per_cell: Vec<SliceStat> = acc.iter().map(|(&(g, b), a)| a.stat(g, Some(b))).collect();
    let excluded = (0..groups.len())
        .filter(|g| !acc.range((*g, 0)..(*g, nb)).any(|_| true))
        .collect();
    Ok(finish(per_cell, excluded, fresh.len()))
}

impl CalibrationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// One row per slice. `comment` lines are written first, each prefixed
    /// with `# `.
    pub fn write_csv(&self, path: &Path, comment: &[String]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for c in comment {
            writeln!(f, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["group", "bucket", "count", "mean_residual", "gap", "se"])?;
        for s in &self.per_cell {
            w.write_record([
                s.group.to_string(),
                s.bucket.map_or(String::new(), |b| b.to_string()),
                s.count.to_string(),
                s.mean_residual.to_string(),
                s.gap.to_string(),
                s.se.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean of `(p_hat(x) - p*(x))^2` over the dataset.
pub fn mse_vs_truth<P: Predictor + ?Sized>(predictor: &P, data: &Dataset) -> Result<f64> {
    let truth = data.p_star().ok_or(Error::MissingTruth)?;
    let rows: Vec<&[f64]> = data.rows().collect();
    let sq: Vec<f64> = rows
        .par_iter()
        .zip(truth.par_iter())
        .map(|(x, p)| (predictor.predict(x) - p).powi(2))
        .collect();
    Ok(sq.iter().sum::<f64>() / sq.len() as f64)
}

/// One point of a finite input domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPoint {
    pub x: Vec<f64>,
    pub weight: f64,
    pub p_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactCell {
    pub cell: usize,
    pub mass: f64,
    /// `E[Y - p_hat | cell]`.
    pub mean_residual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub per_cell: Vec<ExactCell>,
    pub max_gap: f64,
}

fn check_domain(domain: &[DomainPoint]) -> Result<()> {
    if domain.is_empty() {
        return Err(Error::Empty("domain"));
    }
    if domain.len() > MAX_DOMAIN {
        return Err(Error::param("domain", format!("{} points exceed the limit {MAX_DOMAIN}", domain.len())));
    }
    if domain.iter().any(|p| !(p.weight >= 0.0) || !(0.0..=1.0).contains(&p.p_star)) {
        return Err(Error::param("domain", "weights must be nonnegative and p* in [0, 1]"));
    }
    let sum: f64 = domain.iter().map(|p| p.weight).sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::WeightSum { sum });
    }
    Ok(())
}

/// Exact `E[Y - p_hat | cell]` on a finite domain, using `E[Y | x] = p*(x)`.
/// Cells of zero mass are omitted.
pub fn exact_calibration_enumerable<P, C>(domain: &[DomainPoint], predictor: &P, cell_of: C) -> Result<ExactReport>
where
    P: Predictor + ?Sized,
    C: Fn(&[f64]) -> usize,
{
    check_domain(domain)?;
    let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for p in domain {
        let e = acc.entry(cell_of(&p.x)).or_default();
        e.0 += p.weight;
        e.1 += p.weight * (p.p_star - predictor.predict(&p.x));
    }
    let per_cell: Vec<ExactCell> = acc
        .into_iter()
        .filter(|(_, (m, _))| *m > 0.0)
        .map(|(cell, (m, s))| ExactCell {
            cell,
            mass: m,
            mean_residual: s / m,
            gap: (s / m).abs(),
        })
        .collect();
    let max_gap = per_cell.iter().map(|c| c.gap).fold(0.0, f64::max);
    Ok(ExactReport { per_cell, max_gap })
}

/// `n` i.i.d. draws from a finite domain with Bernoulli labels.
pub fn sample_enumerable(domain: &[DomainPoint], n: usize, seed: Seed) -> Result<Dataset> {
    check_domain(domain)?;
    let d = domain[0].x.len();
    if domain.iter().any(|p| p.x.len() != d) {
        return Err(Error::param("domain", "points have different dimensions"));
    }
    let dist = WeightedIndex::new(domain.iter().map(|p| p.weight)).map_err(|e| Error::param("domain", e.to_string()))?;
    let mut rng = seed.derive(stream::INPUTS).rng();
    let mut x = Vec::with_capacity(n * d);
    let mut p = Vec::with_capacity(n);
    for _ in 0..n {
        let i = dist.sample(&mut rng);
        x.extend_from_slice(&domain[i].x);
        p.push(domain[i].p_star);
    }
    let y = bernoulli_labels(&p, seed.derive(stream::LABELS));
    Dataset::new(x, d, y, Some(p), seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `(log n, log metric)`.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(log n, log metric)`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 4 {
        return Err(Error::InsufficientSamples {
            needed: 4,
            got: points.len(),
        });
    }
    for (i, &(n, m)) in points.iter().enumerate() {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::NonPositiveMetric { index: i, value: m });
        }
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::param("n", format!("point {i} has nonpositive size {n}")));
        }
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(n, m)| (n.ln(), m.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("n", "all sizes are equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(RateFit {
        points: logs,
        slope,
        intercept,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::ConstantPredictor;

    fn two_point() -> Vec<DomainPoint> {
        vec![
            DomainPoint {
                x: vec![0.0],
                weight: 0.5,
                p_star: 0.2,
            },
            DomainPoint {
                x: vec![1.0],
                weight: 0.5,
                p_star: 0.8,
            },
        ]
    }

    #[test]
    fn exact_two_point() {
        let one = exact_calibration_enumerable(&two_point(), &ConstantPredictor(0.5), |_| 0).unwrap();
        assert!(one.max_gap.abs() < 1e-15);
        let two = exact_calibration_enumerable(&two_point(), &ConstantPredictor(0.5), |x| x[0] as usize).unwrap();
        assert_eq!(two.per_cell.len(), 2);
        for c in &two.per_cell {
            assert!((c.gap - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_sum_checked() {
        let mut d = two_point();
        d[0].weight = 0.6;
        assert!(matches!(
            exact_calibration_enumerable(&d, &ConstantPredictor(0.5), |_| 0),
            Err(Error::WeightSum { .. })
        ));
    }

    #[test]
    fn rate_fits() {
        let inv: Vec<(f64, f64)> = (10..16).map(|k| (f64::from(1 << k), 3.0 / f64::from(1 << k))).collect();
        let f = fit_rate(&inv).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let sq: Vec<(f64, f64)> = (10..16).map(|k| (f64::from(1 << k), 1.0 / f64::from(1 << k).sqrt())).collect();
        assert!((fit_rate(&sq).unwrap().slope + 0.5).abs() < 1e-12);
        assert!(matches!(
            fit_rate(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0), (4.0, 1.0)]),
            Err(Error::NonPositiveMetric { index: 1, .. })
        ));
        assert!(fit_rate(&inv[..3]).is_err());
    }

    #[test]
    fn mse_examples() {
        let x = vec![0.0, 1.0, 2.0];
        let p = vec![0.1, 0.5, 0.7];
        let data = Dataset::new(x, 1, vec![0, 1, 1], Some(p.clone()), Seed(0)).unwrap();
        let exact = crate::calibrate::FnPredictor(|x: &[f64]| p[x[0] as usize]);
        assert_eq!(mse_vs_truth(&exact, &data).unwrap(), 0.0);
        let shifted = crate::calibrate::FnPredictor(|x: &[f64]| p[x[0] as usize] + 0.1);
        assert!((mse_vs_truth(&shifted, &data).unwrap() - 0.01).abs() < 1e-12);
        let no_truth = Dataset::new(vec![0.0], 1, vec![0], None, Seed(0)).unwrap();
        assert!(matches!(mse_vs_truth(&exact, &no_truth), Err(Error::MissingTruth)));
    }

    #[test]
    fn group_report_constant_predictors() {
        let n = 20_000;
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let data = Dataset::new(x, 1, y, None, Seed(0)).unwrap();
        let all = GroupCollection::everything();
        let good = calibration_report_groups(&ConstantPredictor(0.5), &all, &data, 0.1).unwrap();
        assert!(good.max_gap < 1e-12);
        let zero = calibration_report_groups(&ConstantPredictor(0.0), &all, &data, 0.1).unwrap();
        assert!((zero.max_gap - 0.5).abs() < 1e-12);
    }
}
