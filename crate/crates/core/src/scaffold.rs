//! Quantile cells over a representation space.
//!
//! A [`ScaffoldPartition`] splits `R^r` into `K = B^r` cells by a depth-`r`
//! tree. The node at level `j` holds `B - 1` cut points on coordinate `j`;
//! a value `v` goes to child `#{cuts <= v}`, so bins are left-closed and
//! right-open and the outermost bins are unbounded. Leaves are numbered in
//! depth-first order, which makes the cell id of bins `(b_1, ..., b_r)` the
//! base-`B` number `b_1 b_2 ... b_r`.
//!
//! Cut `b` at a node holding the sorted values `v_0 <= ... <= v_{m-1}` is
//! `v[min(ceil(b m / B), m - 1)]` (inverse empirical CDF), so with distinct
//! values every child receives `floor(m/B)` or `ceil(m/B)` points.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, MlpSpec};
use crate::error::{Error, Result};

pub const PARTITION_VERSION: u32 = 1;

/// Refuse partitions with more cells than this.
pub const MAX_CELLS: usize = 1 << 24;

/// A map `h: R^d -> R^r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReprFile", into = "ReprFile")]
pub struct ReprFn {
    kind: ReprKind,
    r: usize,
    d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReprKind {
    /// `x -> W x` with `W` given as `r` rows of length `d`.
    Linear { w: Vec<Vec<f64>> },
    /// Post-activation output of layer `depth` of a network.
    MlpPrefix { spec: MlpSpec, depth: usize },
    /// Tabulated values; a query returns the value of the nearest tabulated
    /// point (Euclidean, first on ties), so evaluation is total.
    Table { points: Vec<Vec<f64>>, values: Vec<Vec<f64>> },
}

#[derive(Serialize, Deserialize)]
struct ReprFile {
    #[serde(flatten)]
    kind: ReprKind,
}

impl TryFrom<ReprFile> for ReprFn {
    type Error = Error;
    fn try_from(f: ReprFile) -> Result<Self> {
        ReprFn::from_kind(f.kind)
    }
}

impl From<ReprFn> for ReprFile {
    fn from(h: ReprFn) -> Self {
        ReprFile { kind: h.kind }
    }
}

fn rect(rows: &[Vec<f64>], what: &str) -> Result<(usize, usize)> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::param("repr", format!("{what} must be a nonempty rectangular array")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::param("repr", format!("{what} has non-finite entries")));
    }
    Ok((n, m))
}

impl ReprFn {
    pub fn from_kind(kind: ReprKind) -> Result<Self> {
        let (r, d) = match &kind {
            ReprKind::Linear { w } => rect(w, "linear weights")?,
            ReprKind::MlpPrefix { spec, depth } => {
                if *depth == 0 || *depth >= spec.depth() {
                    return Err(Error::DepthOutOfRange {
                        depth: *depth,
                        layers: spec.depth(),
                    });
                }
                (spec.width_at(*depth), spec.input_dim())
            }
            ReprKind::Table { points, values } => {
                let (n, d) = rect(points, "table points")?;
                let (nv, r) = rect(values, "table values")?;
                if n != nv {
                    return Err(Error::DimensionMismatch {
                        context: "table values".into(),
                        expected: n,
                        got: nv,
                    });
                }
                (r, d)
            }
        };
        Ok(ReprFn { kind, r, d })
    }

    pub fn linear(w: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_kind(ReprKind::Linear { w })
    }

    /// Projection onto the listed input coordinates.
    pub fn coordinates(d: usize, coords: &[usize]) -> Result<Self> {
        if coords.iter().any(|&c| c >= d) {
            return Err(Error::param("coords", format!("coordinate out of range for d = {d}")));
        }
        Self::linear(
            coords
                .iter()
                .map(|&c| (0..d).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn mlp_prefix(spec: MlpSpec, depth: usize) -> Result<Self> {
        Self::from_kind(ReprKind::MlpPrefix { spec, depth })
    }

    pub fn table(points: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_kind(ReprKind::Table { points, values })
    }

    pub fn kind(&self) -> &ReprKind {
        &self.kind
    }

    /// Output dimension.
    pub fn r(&self) -> usize {
        self.r
    }

    /// Input dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Evaluates `h(x)` into `out` (cleared first).
    ///
    /// # Panics
    /// If `x.len() != self.d()`.
    pub fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        assert_eq!(x.len(), self.d, "representation input has length {}, expected {}", x.len(), self.d);
        out.clear();
        match &self.kind {
            ReprKind::Linear { w } => {
                out.extend(w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()));
            }
            ReprKind::MlpPrefix { spec, depth } => {
                out.extend(spec.eval_prefix(*depth, x).expect("validated depth and dims"));
            }
            ReprKind::Table { points, values } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, p) in points.iter().enumerate() {
                    let dist: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_d {
                        best_d = dist;
                        best = i;
                    }
                }
                out.extend_from_slice(&values[best]);
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.r);
        self.eval_into(x, &mut out);
        out
    }

    pub fn try_eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                context: "representation input".into(),
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(self.eval(x))
    }

    /// `h` applied to every row of a row-major matrix; returns `n x r`
    /// row-major values.
    pub fn eval_rows(&self, x: &[f64]) -> Vec<f64> {
        x.par_chunks(self.d)
            .flat_map_iter(|row| self.eval(row))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMode {
    /// Each node splits at quantiles of the training points routed to it.
    #[default]
    Conditional,
    /// Every node of level `j` uses the quantiles of all training values of
    /// coordinate `j`.
    GlobalGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        coord: usize,
        cuts: Vec<f64>,
        children: Vec<Node>,
    },
    Leaf {
        cell: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldPartition {
    r: usize,
    b: usize,
    mode: QuantileMode,
    root: Node,
    train_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    version: u32,
    r: usize,
    b: usize,
    mode: QuantileMode,
    train_counts: Vec<usize>,
    tree: Node,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

/// Bin of `v` among nondecreasing `cuts`: the number of cuts `<= v`.
#[inline]
pub fn bin_of(cuts: &[f64], v: f64) -> usize {
    cuts.partition_point(|c| *c <= v)
}

/// Inverse-empirical-CDF cuts of already sorted values.
fn quantile_cuts(sorted: &[f64], b: usize) -> Vec<f64> {
    let m = sorted.len();
    (1..b)
        .map(|k| {
            let at = (k * m).div_ceil(b).min(m - 1);
            sorted[at]
        })
        .collect()
}

fn sorted_coord(values: &[f64], r: usize, idx: &[usize], j: usize) -> Vec<f64> {
    let mut v: Vec<f64> = idx.iter().map(|&i| values[i * r + j]).collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn num_cells(b: usize, r: usize) -> Result<usize> {
    let mut k: usize = 1;
    for _ in 0..r {
        k = k
            .checked_mul(b)
            .filter(|k| *k <= MAX_CELLS)
            .ok_or_else(|| Error::param("B", format!("B^r = {b}^{r} exceeds {MAX_CELLS} cells")))?;
    }
    Ok(k)
}

struct Builder<'a> {
    values: &'a [f64],
    r: usize,
    b: usize,
    mode: QuantileMode,
    global: Vec<Vec<f64>>,
    next_cell: usize,
    routing: Vec<usize>,
    counts: Vec<usize>,
}

impl Builder<'_> {
    fn node(&mut self, level: usize, idx: Vec<usize>) -> Node {
        if level == self.r {
            let cell = self.next_cell;
            self.next_cell += 1;
            for &i in &idx {
                self.routing[i] = cell;
            }
            self.counts.push(idx.len());
            return Node::Leaf { cell };
        }
        let cuts = match self.mode {
            QuantileMode::GlobalGrid => self.global[level].clone(),
            QuantileMode::Conditional if idx.is_empty() => self.global[level].clone(),
            QuantileMode::Conditional => quantile_cuts(&sorted_coord(self.values, self.r, &idx, level), self.b),
        };
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); self.b];
        for i in idx {
            parts[bin_of(&cuts, self.values[i * self.r + level])].push(i);
        }
        let children = parts.into_iter().map(|p| self.node(level + 1, p)).collect();
        Node::Split {
            coord: level,
            cuts,
            children,
        }
    }
}

impl ScaffoldPartition {
    /// Builds the partition from representation values (`n x r`, row-major)
    /// and returns it with the cell of each training point.
    pub fn from_values(values: &[f64], r: usize, b: usize, mode: QuantileMode) -> Result<(Self, Vec<usize>)> {
        if r == 0 {
            return Err(Error::param("r", "representation dimension must be positive"));
        }
        if b == 0 {
            return Err(Error::param("B", "need at least one branch per coordinate"));
        }
        if !values.len().is_multiple_of(r) {
            return Err(Error::DimensionMismatch {
                context: "representation values".into(),
                expected: r,
                got: values.len() % r,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite representation value".into()));
        }
        let n = values.len() / r;
        let k = num_cells(b, r)?;
        if n < k {
            return Err(Error::InsufficientSamples { needed: k, got: n });
        }
        let all: Vec<usize> = (0..n).collect();
        let global = (0..r).map(|j| quantile_cuts(&sorted_coord(values, r, &all, j), b)).collect();
        let mut builder = Builder {
            values,
            r,
            b,
            mode,
            global,
            next_cell: 0,
            routing: vec![0; n],
            counts: Vec::with_capacity(k),
        };
        let root = builder.node(0, all);
        let part = ScaffoldPartition {
            r,
            b,
            mode,
            root,
            train_counts: builder.counts,
        };
        Ok((part, builder.routing))
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Branches per coordinate.
    pub fn b(&self) -> usize {
        self.b
    }

    /// Number of cells `B^r`.
    pub fn k(&self) -> usize {
        self.train_counts.len()
    }

    pub fn mode(&self) -> QuantileMode {
        self.mode
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn train_counts(&self) -> &[usize] {
        &self.train_counts
    }

    /// Cell of a representation value. Total: every finite (or infinite)
    /// vector lands in exactly one cell.
    ///
    /// # Panics
    /// If `hv.len() != self.r()`.
    pub fn assign_value(&self, hv: &[f64]) -> usize {
        assert_eq!(hv.len(), self.r, "representation value has length {}, expected {}", hv.len(), self.r);
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { cell } => return *cell,
                Node::Split { coord, cuts, children } => node = &children[bin_of(cuts, hv[*coord])],
            }
        }
    }

    /// `G(x)`: the cell of `h(x)`.
    pub fn assign(&self, h: &ReprFn, x: &[f64]) -> usize {
        self.assign_value(&h.eval(x))
    }

    /// Cells of every row of a row-major matrix.
    pub fn assign_rows(&self, h: &ReprFn, x: &[f64]) -> Vec<usize> {
        x.par_chunks(h.d()).map(|row| self.assign(h, row)).collect()
    }

    fn to_file(&self) -> PartitionFile {
        PartitionFile {
            version: PARTITION_VERSION,
            r: self.r,
            b: self.b,
            mode: self.mode,
            train_counts: self.train_counts.clone(),
            tree: self.root.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("partition serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: "empty partition file".into(),
            });
        }
        let probe: VersionProbe = crate::io::from_json_str(text, origin)?;
        if probe.version != PARTITION_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.version,
                expected: PARTITION_VERSION,
            });
        }
        let file: PartitionFile = crate::io::from_json_str(text, origin)?;
        Self::validate(file).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    fn validate(f: PartitionFile) -> Result<Self> {
        if f.r == 0 || f.b == 0 {
            return Err(Error::param("partition", "r and B must be positive"));
        }
        let k = num_cells(f.b, f.r)?;
        if f.train_counts.len() != k {
            return Err(Error::DimensionMismatch {
                context: "train_counts".into(),
                expected: k,
                got: f.train_counts.len(),
            });
        }
        let mut next = 0usize;
        check_node(&f.tree, 0, f.r, f.b, &mut next)?;
        Ok(ScaffoldPartition {
            r: f.r,
            b: f.b,
            mode: f.mode,
            root: f.tree,
            train_counts: f.train_counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }
}

fn check_node(node: &Node, level: usize, r: usize, b: usize, next: &mut usize) -> Result<()> {
    match node {
        Node::Leaf { cell } => {
            if level != r {
                return Err(Error::InvalidSpec(format!("leaf at level {level}, expected {r}")));
            }
            if *cell != *next {
                return Err(Error::InvalidSpec(format!("leaf id {cell} out of depth-first order (expected {next})")));
            }
            *next += 1;
            Ok(())
        }
        Node::Split { coord, cuts, children } => {
            if level >= r || *coord != level {
                return Err(Error::InvalidSpec(format!("split on coordinate {coord} at level {level}")));
            }
            if cuts.len() + 1 != b || children.len() != b {
                return Err(Error::InvalidSpec(format!(
                    "node at level {level} has {} cuts and {} children for B = {b}",
                    cuts.len(),
                    children.len()
                )));
            }
            if cuts.iter().any(|c| !c.is_finite()) || cuts.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidSpec(format!("cuts at level {level} are not finite and nondecreasing")));
            }
            children.iter().try_for_each(|c| check_node(c, level + 1, r, b, next))
        }
    }
}

/// Evaluates `h` on the dataset and builds the `B^r` cells.
pub fn build_partition(h: &ReprFn, data: &Dataset, b: usize, mode: QuantileMode) -> Result<ScaffoldPartition> {
    if data.dim() != h.d() {
        return Err(Error::DimensionMismatch {
            context: "dataset vs representation input".into(),
            expected: h.d(),
            got: data.dim(),
        });
    }
    let values = h.eval_rows(data.features());
    Ok(ScaffoldPartition::from_values(&values, h.r(), b, mode)?.0)
}
