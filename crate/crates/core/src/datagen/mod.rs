//! Synthetic ground-truth models and datasets.

mod dataset;
mod digitlike;
mod law;
mod mlp;
mod transfer;
mod zoo;

pub use dataset::{Dataset, DatasetMeta};
pub use digitlike::{digitlike_levels, digitlike_truth, digitlike_with_separation, level_probability, DEFAULT_SEPARATION};
pub use law::{truncated_normal_variance, InputLaw, LawKind};
pub use mlp::{Activation, Layer, MlpSpec, OutputAffine, CLAMP_HI, CLAMP_LO, MIN_CLAMP_SAMPLE};
pub use transfer::{
    link_partial, orthonormality_deviation, sample_transfer, task_seed, Shift, TransferTask, TransferTaskFamily,
    CONCEPT_WEIGHT, COVARIATE_GAIN, COVARIATE_HIGH, COVARIATE_LOW, DIVERSITY_FACTOR, FD_STEP, GRADIENT_MC,
};
pub use zoo::{
    bernoulli_labels, clamp_for_law, clamp_for_laws, corrupt_final_layer, random_homogeneous, random_orthonormal_rows,
    random_smooth, sample_dataset, CLAMP_SAMPLE, MIN_HOMOGENEOUS_GAIN,
};
