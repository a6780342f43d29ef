//! The colorized-glyph benchmark: datasets with closed-form fibers, MNIST
//! ingestion, fidelity and consistency metrics, sweeps and report files.

mod eval;
mod glyphs;
mod metrics;
mod mnist;
mod models;
mod ppm;
mod report;

pub use eval::{
    consistency_of_colors, eval_consistency, eval_fidelity, eval_marginal_consistency, median,
    recovered_colors, ConsistencyReport, ConstantModel, FiberModel, FidelityReport, LossStats,
    MarginalReport, OracleResampler,
};
pub use glyphs::{colorize_grays, generate_glyphs, GlyphDataset, GlyphVariant};
pub use metrics::{
    bin_index, histogram, kl_divergence, kl_to_prior, w2_to_prior, ColorPrior, KL_BINS,
    KL_SMOOTHING, MIN_CONSISTENCY_SAMPLES,
};
pub use mnist::{encode_idx_images, encode_idx_labels, load_mnist_idx, parse_idx_images, parse_idx_labels, MnistData};
pub use models::{sample_sets, ConditionalFiberModel, GuidedFiberModel};
pub use ppm::{quantize, tile_ppm, tile_ppm_with_comment, write_ppm};
pub use report::{median_by_value, run_sweep, BenchmarkReport, CellResult, ReportRow, SweepAxis};

use crate::guidance::GuidanceError;
use crate::numerics::NumericsError;
use crate::score_models::ScoreModelError;
use crate::subject::SubjectError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("IDX: {0}")]
    Idx(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Subject(#[from] SubjectError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    ScoreModel(#[from] ScoreModelError),
}
