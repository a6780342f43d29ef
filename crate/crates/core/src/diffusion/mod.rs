//! Noise schedules, forward noising, Tweedie estimates, unguided samplers
//! and the denoising score-matching objective.

mod dsm;
mod sampler;
mod schedule;

pub use dsm::{dsm_loss, dsm_objective, DsmOutput};
pub use sampler::{
    denoise_step, denoise_step_tape, denoise_step_with_score, forward_noise, noise_with, sample_prior, tweedie_estimate,
    tweedie_tape, SamplerMode,
};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("time step {t} outside [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{rows} rows but {rngs} random streams")]
    StreamCount { rows: usize, rngs: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Evaluator of `∇ log p_t(x_t)` under a bound noise schedule.
///
/// Inputs are batches `[n, dim]`; implementations must be safe to evaluate
/// concurrently.
pub trait ScoreModel: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn dim(&self) -> usize;

    fn score(&self, x: &Tensor, t: usize) -> Result<Tensor, NumericsError>;

    /// Differentiable (w.r.t. `x`) score evaluation.
    fn score_tape(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var, NumericsError>;
}

impl<S: ScoreModel + ?Sized> ScoreModel for &S {
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, x: &Tensor, t: usize) -> Result<Tensor, NumericsError> {
        (**self).score(x, t)
    }
    fn score_tape(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var, NumericsError> {
        (**self).score_tape(tape, x, t)
    }
}

impl<S: ScoreModel + ?Sized> ScoreModel for Box<S> {
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, x: &Tensor, t: usize) -> Result<Tensor, NumericsError> {
        (**self).score(x, t)
    }
    fn score_tape(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var, NumericsError> {
        (**self).score_tape(tape, x, t)
    }
}
