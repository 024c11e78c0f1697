//! Explicit layered networks used as synthetic ground truth `p*` and as
//! representation prefixes.
//!
//! A network is a list of dense layers `z = W a + b`, `a' = act(z)`. The last
//! layer has a single output. A probability-clamped network additionally
//! carries an affine output map `(scale, offset)`; its output is
//! `clip(scale * raw + offset, 0, 1)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest sample accepted by [`MlpSpec::clamp_to_probability`].
pub const MIN_CLAMP_SAMPLE: usize = 10_000;

/// Target output interval of a clamped network.
pub const CLAMP_LO: f64 = 0.02;
pub const CLAMP_HI: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Activation::Identity => z,
        }
    }
}

/// Dense layer with row-major weights of shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerFile", into = "LayerFile")]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

impl TryFrom<LayerFile> for Layer {
    type Error = Error;
    fn try_from(f: LayerFile) -> Result<Self> {
        Layer::new(f.weights, f.bias, f.activation)
    }
}

impl From<Layer> for LayerFile {
    fn from(l: Layer) -> Self {
        LayerFile {
            weights: (0..l.out_dim).map(|i| l.row(i).to_vec()).collect(),
            bias: l.bias,
            activation: l.activation,
        }
    }
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let out_dim = weights.len();
        if out_dim == 0 {
            return Err(Error::InvalidSpec("layer has no output units".into()));
        }
        let in_dim = weights[0].len();
        if in_dim == 0 || weights.iter().any(|r| r.len() != in_dim) {
            return Err(Error::InvalidSpec("ragged or empty weight matrix".into()));
        }
        if bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                context: "layer bias".into(),
                expected: out_dim,
                got: bias.len(),
            });
        }
        let flat: Vec<f64> = weights.into_iter().flatten().collect();
        if flat.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite weight or bias".into()));
        }
        Ok(Layer {
            in_dim,
            out_dim,
            weights: flat,
            bias,
            activation,
        })
    }

    /// Bias-free layer.
    pub fn unbiased(weights: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        let out = weights.len();
        Layer::new(weights, vec![0.0; out], activation)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn weights_flat(&self) -> &[f64] {
        &self.weights
    }

    fn max_abs_weight(&self) -> f64 {
        self.weights.iter().fold(0.0_f64, |m, w| m.max(w.abs()))
    }

    /// Pre-activations `W a + b`.
    #[inline]
    fn affine_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.out_dim {
            let row = self.row(i);
            let mut z = self.bias[i];
            for (w, a) in row.iter().zip(input) {
                z += w * a;
            }
            out.push(z);
        }
    }

    #[inline]
    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        self.affine_into(input, out);
        for z in out.iter_mut() {
            *z = self.activation.apply(*z);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputAffine {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct MlpSpec {
    input_dim: usize,
    layers: Vec<Layer>,
    weight_bound: f64,
    homogeneous: bool,
    output_affine: Option<OutputAffine>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    input_dim: usize,
    weight_bound: f64,
    homogeneous: bool,
    layers: Vec<Layer>,
    #[serde(default)]
    output_affine: Option<OutputAffine>,
}

impl TryFrom<MlpFile> for MlpSpec {
    type Error = Error;
    fn try_from(f: MlpFile) -> Result<Self> {
        let spec = MlpSpec::new(f.input_dim, f.layers, f.weight_bound, f.homogeneous)?;
        match f.output_affine {
            Some(a) => spec.with_output_affine(a),
            None => Ok(spec),
        }
    }
}

impl From<MlpSpec> for MlpFile {
    fn from(s: MlpSpec) -> Self {
        MlpFile {
            input_dim: s.input_dim,
            weight_bound: s.weight_bound,
            homogeneous: s.homogeneous,
            layers: s.layers,
            output_affine: s.output_affine,
        }
    }
}

impl MlpSpec {
    /// Validates the layer chain, the scalar output, the weight bound and, for
    /// `homogeneous` specs, that every bias is zero.
    pub fn new(input_dim: usize, layers: Vec<Layer>, weight_bound: f64, homogeneous: bool) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidSpec("input dimension must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        let mut prev = input_dim;
        for (j, layer) in layers.iter().enumerate() {
            if layer.in_dim != prev {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {j} input"),
                    expected: prev,
                    got: layer.in_dim,
                });
            }
            prev = layer.out_dim;
            if layer.max_abs_weight() > weight_bound {
                return Err(Error::InvalidSpec(format!(
                    "layer {j} has a weight of magnitude {} above the bound {weight_bound}",
                    layer.max_abs_weight()
                )));
            }
            if homogeneous && layer.bias.iter().any(|b| *b != 0.0) {
                return Err(Error::InvalidSpec(format!("homogeneous spec has a nonzero bias in layer {j}")));
            }
        }
        if prev != 1 {
            return Err(Error::DimensionMismatch {
                context: "network output".into(),
                expected: 1,
                got: prev,
            });
        }
        Ok(MlpSpec {
            input_dim,
            layers,
            weight_bound,
            homogeneous,
            output_affine: None,
        })
    }

    pub fn with_output_affine(mut self, affine: OutputAffine) -> Result<Self> {
        if !(affine.scale.is_finite() && affine.offset.is_finite()) || affine.scale == 0.0 {
            return Err(Error::InvalidSpec("output affine map must be finite with nonzero scale".into()));
        }
        self.output_affine = Some(affine);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of layers `k`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weight_bound(&self) -> f64 {
        self.weight_bound
    }

    pub fn is_homogeneous(&self) -> bool {
        self.homogeneous
    }

    pub fn output_affine(&self) -> Option<OutputAffine> {
        self.output_affine
    }

    /// Output width of the prefix of the given depth.
    pub fn width_at(&self, depth: usize) -> usize {
        if depth == 0 {
            self.input_dim
        } else {
            self.layers[depth - 1].out_dim
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "layer 0 input".into(),
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn finish(&self, raw: f64) -> f64 {
        match self.output_affine {
            Some(a) => (a.scale * raw + a.offset).clamp(0.0, 1.0),
            None => raw,
        }
    }

    /// Runs layers `from..` on `input`, returning the raw scalar output.
    fn run_from(&self, from: usize, input: &[f64]) -> f64 {
        let mut cur = input.to_vec();
        let mut next = Vec::with_capacity(cur.len());
        for layer in &self.layers[from..] {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Forward pass through all layers, including the output map if present.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.finish(self.run_from(0, x)))
    }

    /// Forward pass without the clamp map.
    pub fn eval_raw(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.run_from(0, x))
    }

    /// Post-activation output of layer `depth`, for `1 <= depth < k`.
    pub fn eval_prefix(&self, depth: usize, x: &[f64]) -> Result<Vec<f64>> {
        if depth == 0 || depth >= self.depth() {
            return Err(Error::DepthOutOfRange {
                depth,
                layers: self.depth(),
            });
        }
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[..depth] {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Applies layers `depth..k` (and the output map) to a prefix output.
    pub fn eval_suffix(&self, depth: usize, hidden: &[f64]) -> Result<f64> {
        if depth == 0 || depth >= self.depth() {
            return Err(Error::DepthOutOfRange {
                depth,
                layers: self.depth(),
            });
        }
        let width = self.width_at(depth);
        if hidden.len() != width {
            return Err(Error::DimensionMismatch {
                context: format!("layer {depth} input"),
                expected: width,
                got: hidden.len(),
            });
        }
        Ok(self.finish(self.run_from(depth, hidden)))
    }

    /// Evaluates the network as a function of the first layer's weighted
    /// input `u = W1 x`: the first layer's bias and activation and every later
    /// layer are applied. This is the link function `g` with `p*(x) = g(W1 x)`.
    pub fn eval_link(&self, u: &[f64]) -> Result<f64> {
        let first = &self.layers[0];
        if u.len() != first.out_dim {
            return Err(Error::DimensionMismatch {
                context: "link input".into(),
                expected: first.out_dim,
                got: u.len(),
            });
        }
        let hidden: Vec<f64> = u
            .iter()
            .zip(&first.bias)
            .map(|(ui, b)| first.activation.apply(ui + b))
            .collect();
        Ok(self.finish(self.run_from(1, &hidden)))
    }

    /// `W1 x` for the first layer (no bias, no activation).
    pub fn first_layer_projection(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let first = &self.layers[0];
        Ok((0..first.out_dim)
            .map(|i| first.row(i).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// Effective `q(1)` of a bias-free ReLU network whose first layer has a
    /// single unit: the suffix evaluated at hidden value 1, times the clamp
    /// scale when present. For such networks `p*(x) = q(1) max(0, W1 x)` up
    /// to the clamp offset.
    pub fn homogeneous_gain(&self) -> Result<f64> {
        if !self.homogeneous {
            return Err(Error::NotHomogeneous("spec is not flagged homogeneous".into()));
        }
        if self.depth() < 2 {
            return Err(Error::NotHomogeneous("need at least two layers".into()));
        }
        let first = &self.layers[0];
        if first.out_dim != 1 {
            return Err(Error::NotHomogeneous(format!(
                "first layer has {} units, need exactly one",
                first.out_dim
            )));
        }
        let last = self.depth() - 1;
        for (j, layer) in self.layers.iter().enumerate() {
            let ok = if j == last {
                matches!(layer.activation, Activation::Identity | Activation::Relu)
            } else {
                layer.activation == Activation::Relu
            };
            if !ok {
                return Err(Error::NotHomogeneous(format!("layer {j} activation {:?}", layer.activation)));
            }
        }
        let scale = self.output_affine.map_or(1.0, |a| a.scale);
        Ok(scale * self.run_from(1, &[1.0]))
    }

    /// Returns a copy whose output is affinely rescaled so that the raw
    /// output range over `sample` maps onto `[0.02, 0.98]`. The map is stored
    /// on the network, so evaluating the returned network gives the exact truth.
    /// Any existing output map is replaced.
    pub fn clamp_to_probability<'a, I>(&self, sample: I) -> Result<MlpSpec>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut count = 0usize;
        for x in sample {
            let v = self.eval_raw(x)?;
            lo = lo.min(v);
            hi = hi.max(v);
            count += 1;
        }
        if count < MIN_CLAMP_SAMPLE {
            return Err(Error::InsufficientSamples {
                needed: MIN_CLAMP_SAMPLE,
                got: count,
            });
        }
        if !(hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
            return Err(Error::DegenerateSpec { value: lo });
        }
        let scale = (CLAMP_HI - CLAMP_LO) / (hi - lo);
        let offset = CLAMP_LO - scale * lo;
        self.clone().with_output_affine(OutputAffine { scale, offset })
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        format!("{digest:x}")
    }
}
