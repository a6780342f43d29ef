//! Score models: exact Gaussian-mixture oracles, a trainable unconditional
//! denoiser and a conditional flow-matching model.

mod conditional;
mod denoiser;
mod gmm;

pub use conditional::{train_conditional, ConditionalDenoiser, FiberRegSpec};
pub use denoiser::{
    eps_to_score, score_to_eps, time_features, train_prior, with_time_features, ArchSpec,
    skip_path, GaussianSkip, LearnedDenoiser, Parameterization, TraceRow, TrainSpec, TrainTrace, SKIP_EIG_FLOOR,
    TIME_FEATURES,
};
pub use gmm::{gmm_score, AnalyticGmmScore, GmmPrior};
pub(crate) use denoiser::{minibatch, DIVERGENCE_LIMIT};

use crate::diffusion::DiffusionError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ScoreModelError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        trace: TrainTrace,
    },
    #[error("skipped {skipped} of {steps} batches with non-finite fiber loss")]
    TooManySkipped {
        skipped: usize,
        steps: usize,
        trace: TrainTrace,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}
