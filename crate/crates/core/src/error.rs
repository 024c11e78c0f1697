use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate spec: output is constant ({value}) over the sample")]
    DegenerateSpec { value: f64 },

    #[error("prefix depth {depth} out of range for a {layers}-layer network (need 1 <= depth < {layers})")]
    DepthOutOfRange { depth: usize, layers: usize },

    #[error("invalid input law: {0}")]
    InvalidLaw(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("ill-conditioned second-moment matrix (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("matrix rows are not orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },

    #[error("input law is not symmetric about the origin")]
    NonSymmetricLaw,

    #[error("network is not a bias-free single-index ReLU network: {0}")]
    NotHomogeneous(String),

    #[error("dataset carries no ground-truth probabilities")]
    MissingTruth,

    #[error("rate fit needs positive metric values; point {index} has {value}")]
    NonPositiveMetric { index: usize, value: f64 },

    #[error("domain weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported file version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
