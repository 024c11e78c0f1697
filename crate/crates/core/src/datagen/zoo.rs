//! Random network generators and dataset sampling.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::dataset::Dataset;
use super::law::InputLaw;
use super::mlp::{Activation, Layer, MlpSpec, MIN_CLAMP_SAMPLE};
use crate::error::{Error, Result};
use crate::rng::{stream, Seed};

/// Specs whose `|q(1)|` falls below this are rejected by the homogeneous
/// generator: the first-layer direction is then unidentifiable by OLS.
pub const MIN_HOMOGENEOUS_GAIN: f64 = 1e-3;

/// Inputs drawn from the law when fitting the clamp map.
pub const CLAMP_SAMPLE: usize = 2 * MIN_CLAMP_SAMPLE;

/// Draws `n` inputs from `law`, evaluates `spec` and draws Bernoulli labels.
/// Inputs and labels use independent streams derived from `seed`.
pub fn sample_dataset(spec: &MlpSpec, law: &InputLaw, n: usize, seed: Seed) -> Result<Dataset> {
    if spec.input_dim() != law.dim() {
        return Err(Error::DimensionMismatch {
            context: "law dimension vs spec input".into(),
            expected: spec.input_dim(),
            got: law.dim(),
        });
    }
    let d = law.dim();
    let x = law.sample(n, seed.derive(stream::INPUTS));
    let p = x
        .par_chunks(d)
        .map(|row| spec.eval(row))
        .collect::<Result<Vec<f64>>>()?;
    let y = bernoulli_labels(&p, seed.derive(stream::LABELS));
    Dataset::new(x, d, y, Some(p), seed)
}

/// `y_i = 1{u_i < p_i}` with `u_i` uniform on `[0, 1)`.
pub fn bernoulli_labels(p: &[f64], seed: Seed) -> Vec<u8> {
    let mut rng = seed.rng();
    p.iter()
        .map(|&pi| {
            let u: f64 = rng.random();
            u8::from(u < pi)
        })
        .collect()
}

/// Fits the clamp map of `spec` on a sample from `law`. For a homogeneous
/// spec on a compact law the sample is augmented with the support points
/// maximizing and minimizing each first-layer unit, so the fitted range is
/// the exact range of the network and no output is ever clipped.
pub fn clamp_for_law(spec: &MlpSpec, law: &InputLaw, seed: Seed) -> Result<MlpSpec> {
    let d = law.dim();
    let mut pts = law.sample(CLAMP_SAMPLE, seed.derive(stream::CLAMP));
    if spec.is_homogeneous() {
        let first = &spec.layers()[0];
        for i in 0..first.out_dim() {
            if let Some((plus, minus)) = law.extreme_points(first.row(i)) {
                pts.extend_from_slice(&plus);
                pts.extend_from_slice(&minus);
            }
        }
    }
    spec.clamp_to_probability(pts.chunks_exact(d))
}

/// Clamp map fitted on a pooled sample from several laws.
pub fn clamp_for_laws(spec: &MlpSpec, laws: &[InputLaw], seed: Seed) -> Result<MlpSpec> {
    let first = laws.first().ok_or(Error::Empty("no laws to pool"))?;
    let d = first.dim();
    let per = CLAMP_SAMPLE.div_ceil(laws.len());
    let mut pts = Vec::with_capacity(per * laws.len() * d);
    for (t, law) in laws.iter().enumerate() {
        pts.extend(law.sample(per, seed.derive2(stream::CLAMP, t as u64)));
    }
    spec.clamp_to_probability(pts.chunks_exact(d))
}

fn uniform_rows(rng: &mut crate::rng::Rng, rows: usize, cols: usize, bound: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-bound..=bound)).collect())
        .collect()
}

/// Random bias-free ReLU network with a single first-layer unit:
/// `p(x) = q(max(0, w . x))` with `q` piecewise linear and positively
/// homogeneous. `depth` is 2 or 3; hidden widths of the suffix are `width`.
/// The weights of the first layer are scaled to unit norm. Draws with
/// `|q(1)| < 1e-3` are rejected and redrawn. The network is not clamped.
pub fn random_homogeneous(d: usize, depth: usize, width: usize, seed: Seed) -> Result<MlpSpec> {
    if !(2..=3).contains(&depth) {
        return Err(Error::param("depth", format!("homogeneous generator supports 2 or 3 layers, got {depth}")));
    }
    if d == 0 || width == 0 {
        return Err(Error::param("width", "dimensions must be positive"));
    }
    for attempt in 0..1000u64 {
        let mut rng = seed.derive2(stream::SPEC, attempt).rng();
        let mut w1: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = w1.iter().map(|v| v * v).sum::<f64>().sqrt();
        w1.iter_mut().for_each(|v| *v /= norm);
        let mut layers = vec![Layer::unbiased(vec![w1], Activation::Relu)?];
        if depth == 3 {
            layers.push(Layer::unbiased(uniform_rows(&mut rng, width, 1, 1.0), Activation::Relu)?);
            layers.push(Layer::unbiased(uniform_rows(&mut rng, 1, width, 1.0), Activation::Identity)?);
        } else {
            layers.push(Layer::unbiased(uniform_rows(&mut rng, 1, 1, 1.0), Activation::Identity)?);
        }
        let spec = MlpSpec::new(d, layers, 1.0, true)?;
        if spec.homogeneous_gain()?.abs() >= MIN_HOMOGENEOUS_GAIN {
            return Ok(spec);
        }
    }
    Err(Error::InvalidSpec("could not draw a homogeneous spec with |q(1)| >= 1e-3".into()))
}

/// Random biased network `d -> widths[0] -> ... -> 1` with `activation` on
/// hidden layers and identity output. Weights and biases are uniform on
/// `[-bound, bound]`. The network is not clamped.
pub fn random_smooth(d: usize, widths: &[usize], activation: Activation, bound: f64, seed: Seed) -> Result<MlpSpec> {
    let mut rng = seed.derive(stream::SPEC).rng();
    let mut layers = Vec::with_capacity(widths.len() + 1);
    let mut prev = d;
    for &w in widths {
        let bias = (0..w).map(|_| rng.random_range(-bound..=bound)).collect();
        layers.push(Layer::new(uniform_rows(&mut rng, w, prev, bound), bias, activation)?);
        prev = w;
    }
    let bias = vec![rng.random_range(-bound..=bound)];
    layers.push(Layer::new(uniform_rows(&mut rng, 1, prev, bound), bias, Activation::Identity)?);
    MlpSpec::new(d, layers, bound, false)
}

/// Replaces the final layer of `spec` by a scrambled copy: weights permuted,
/// negated and perturbed with Gaussian noise of relative size `noise`. The
/// returned network is clamped again on `law`, so it shares the prefix (and
/// hence the representation) of `spec` but has a wrong suffix.
pub fn corrupt_final_layer(spec: &MlpSpec, law: &InputLaw, noise: f64, seed: Seed) -> Result<MlpSpec> {
    let mut rng = seed.derive(stream::CORRUPT).rng();
    let layers = spec.layers();
    let last = layers.last().expect("spec has layers");
    let mut w = last.weights_flat().to_vec();
    w.shuffle(&mut rng);
    let scale = w.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-3);
    for v in w.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v = -*v + noise * scale * e;
    }
    let bound = w.iter().fold(spec.weight_bound(), |m, v| m.max(v.abs()));
    let mut new_layers = layers[..layers.len() - 1].to_vec();
    new_layers.push(Layer::new(vec![w], last.bias().to_vec(), last.activation())?);
    let raw = MlpSpec::new(spec.input_dim(), new_layers, bound, spec.is_homogeneous())?;
    clamp_for_law(&raw, law, seed.derive(stream::CORRUPT))
}

/// `r x d` matrix with orthonormal rows, from the QR factorization of a
/// Gaussian matrix.
pub fn random_orthonormal_rows(r: usize, d: usize, seed: Seed) -> Result<DMatrix<f64>> {
    if r == 0 || r > d {
        return Err(Error::param("r", format!("need 1 <= r <= d, got r={r}, d={d}")));
    }
    let mut rng = seed.rng();
    let g = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    Ok(q.transpose())
}
