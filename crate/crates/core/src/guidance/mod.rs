//! Guided sampling toward a fiber: before every reverse step the current
//! sample is shifted by `gamma_t u_t`, where `u_t` is found by a few gradient
//! steps on the fiber loss of the Tweedie estimate plus control and score
//! regularizers.

mod log;
mod ndtm;

pub use log::{TrajectoryLog, TrajectoryRecord};
pub use ndtm::{
    chain_rngs, correction_step, guided_sample, guided_sample_seeded, target_embeddings, terminal_loss,
    CorrectionDiagnostics, CorrectionOutput, GuidanceFailure, GuidedBatch,
};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, SamplerMode};
use crate::numerics::NumericsError;
use crate::subject::SubjectError;

#[derive(Debug, thiserror::Error)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("noised-target terminal loss needs the target origin")]
    MissingOrigin,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Subject(#[from] SubjectError),
}

/// Guidance strength as a function of the step, with positions given as
/// fractions `t / T` so schedules transfer across schedule lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaSchedule {
    Constant {
        gamma: f64,
    },
    /// `gamma_in` for `t_lo <= t/T <= t_hi`, `gamma_out` elsewhere.
    IntervalBoosted {
        t_hi: f64,
        t_lo: f64,
        gamma_in: f64,
        gamma_out: f64,
    },
    /// Linear from `gamma_start` at `t = T` to `gamma_end` at `t = 0`.
    EndRamp {
        gamma_start: f64,
        gamma_end: f64,
    },
}

impl GammaSchedule {
    pub fn at(&self, t: usize, steps: usize) -> f64 {
        let frac = t as f64 / steps as f64;
        match *self {
            GammaSchedule::Constant { gamma } => gamma,
            GammaSchedule::IntervalBoosted {
                t_hi,
                t_lo,
                gamma_in,
                gamma_out,
            } => {
                if (t_lo..=t_hi).contains(&frac) {
                    gamma_in
                } else {
                    gamma_out
                }
            }
            GammaSchedule::EndRamp {
                gamma_start,
                gamma_end,
            } => gamma_end + (gamma_start - gamma_end) * frac,
        }
    }

    fn values(&self) -> Vec<f64> {
        match *self {
            GammaSchedule::Constant { gamma } => vec![gamma],
            GammaSchedule::IntervalBoosted {
                gamma_in,
                gamma_out,
                ..
            } => vec![gamma_in, gamma_out],
            GammaSchedule::EndRamp {
                gamma_start,
                gamma_end,
            } => vec![gamma_start, gamma_end],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalMode {
    /// `‖phi(tweedie(x_t)) − h‖²`.
    #[default]
    Static,
    /// `‖phi(tweedie(x_t)) − phi(tweedie(x'_t))‖²` with `x'_t ~ q(· | origin)`.
    NoisedTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma: GammaSchedule,
    /// Multiplier applied to every `gamma_t`.
    pub gamma_scale: f64,
    pub kappa: f64,
    pub tau: f64,
    pub inner_steps: usize,
    /// Inner learning rate at `t = T`; decays linearly to 0 at `t = 0`.
    pub lr_start: f64,
    pub terminal: TerminalMode,
    /// Reuse one noise draw per chain for the noised target.
    pub shared_target_noise: bool,
    /// Start each inner optimization from the previous step's `u`.
    pub warm_start: bool,
    pub sampler: SamplerMode,
}

/// Boost window `[0.4 T, 0.7 T]`.
pub const DEFAULT_WINDOW: (f64, f64) = (0.7, 0.4);
pub const DEFAULT_GAMMA_IN: f64 = 32.0;
pub const DEFAULT_GAMMA_OUT: f64 = 16.0;

pub fn make_default_config() -> GuidanceConfig {
    GuidanceConfig {
        gamma: GammaSchedule::IntervalBoosted {
            t_hi: DEFAULT_WINDOW.0,
            t_lo: DEFAULT_WINDOW.1,
            gamma_in: DEFAULT_GAMMA_IN,
            gamma_out: DEFAULT_GAMMA_OUT,
        },
        gamma_scale: 1.0,
        kappa: 1e-4,
        tau: 0.0,
        inner_steps: 6,
        lr_start: 2e-3,
        terminal: TerminalMode::Static,
        shared_target_noise: false,
        warm_start: false,
        sampler: SamplerMode::Ode,
    }
}

/// Guidance confined to the last 30% of the schedule.
pub const LATE_WINDOW: (f64, f64) = (0.3, 0.0);
pub const LATE_GAMMA: f64 = 64.0;

pub fn make_late_config() -> GuidanceConfig {
    GuidanceConfig {
        gamma: GammaSchedule::IntervalBoosted {
            t_hi: LATE_WINDOW.0,
            t_lo: LATE_WINDOW.1,
            gamma_in: LATE_GAMMA,
            gamma_out: 0.0,
        },
        inner_steps: 12,
        lr_start: 1e-4,
        ..make_default_config()
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        make_default_config()
    }
}

impl GuidanceConfig {
    pub fn gamma_at(&self, t: usize, steps: usize) -> f64 {
        self.gamma_scale * self.gamma.at(t, steps)
    }

    pub fn kappa_at(&self, _t: usize) -> f64 {
        self.kappa
    }

    pub fn tau_at(&self, _t: usize) -> f64 {
        self.tau
    }

    pub fn lr_at(&self, t: usize, steps: usize) -> f64 {
        self.lr_start * t as f64 / steps as f64
    }

    /// Same config with every `gamma_t` forced to zero.
    pub fn unguided(&self) -> Self {
        Self {
            gamma_scale: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: &str| Err(GuidanceError::Config(m.into()));
        if self.gamma.values().iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("gamma values must be finite and >= 0");
        }
        if !(self.gamma_scale >= 0.0 && self.gamma_scale.is_finite()) {
            return bad("gamma_scale must be finite and >= 0");
        }
        if let GammaSchedule::IntervalBoosted { t_hi, t_lo, .. } = self.gamma {
            if !(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0) {
                return bad("interval bounds need 0 <= t_lo <= t_hi <= 1");
            }
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1");
        }
        if !(self.lr_start > 0.0 && self.lr_start.is_finite()) {
            return bad("lr_start must be > 0");
        }
        if !(self.kappa >= 0.0) || !(self.tau >= 0.0) {
            return bad("kappa and tau must be >= 0");
        }
        Ok(())
    }
}
