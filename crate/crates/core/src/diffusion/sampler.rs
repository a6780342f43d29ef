use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule, ScoreModel};
use crate::numerics::{normal_rows, StreamRng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Deterministic probability-flow (DDIM, η = 0) step.
    #[default]
    Ode,
    /// Stochastic step drawn from `q(x_{t-1} | x_t, x̂_0)`.
    Ancestral,
}

fn check_streams(rows: usize, rngs: &[StreamRng]) -> Result<(), DiffusionError> {
    if rngs.len() != rows {
        return Err(DiffusionError::StreamCount {
            rows,
            rngs: rngs.len(),
        });
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) x0 + sigma_t eps` with caller-supplied noise.
pub fn noise_with(
    x0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Tensor,
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t, 0)?;
    let (a, s) = (schedule.signal(t), schedule.sigma(t));
    Ok(x0.zip_map(eps, "forward_noise", |x, e| a * x + s * e)?)
}

/// Draws `x_t ~ q(x_t | x_0)`; row `i` uses `rngs[i]`.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rngs: &mut [StreamRng],
) -> Result<Tensor, DiffusionError> {
    schedule.check_step(t, 0)?;
    check_streams(x0.rows(), rngs)?;
    let eps = normal_rows(rngs, x0.cols());
    noise_with(x0, t, schedule, &eps.reshape(x0.shape())?)
}

/// Posterior-mean estimate `E[x_0 | x_t] = (x_t + sigma_t² score) / sqrt(alpha_bar_t)`.
pub fn tweedie_estimate<S: ScoreModel + ?Sized>(
    x: &Tensor,
    t: usize,
    score: &S,
) -> Result<Tensor, DiffusionError> {
    let sch = score.schedule();
    sch.check_step(t, 1)?;
    let s = score.score(x, t)?;
    let (var, a) = (sch.sigma(t).powi(2), sch.signal(t));
    Ok(x.zip_map(&s, "tweedie", |xv, sv| (xv + var * sv) / a)?)
}

/// Differentiable counterpart of [`tweedie_estimate`].
pub fn tweedie_tape<S: ScoreModel + ?Sized>(
    tape: &mut Tape,
    x: Var,
    t: usize,
    score: &S,
) -> Result<Var, DiffusionError> {
    let sch = score.schedule();
    sch.check_step(t, 1)?;
    let s = score.score_tape(tape, x, t)?;
    let scaled = tape.scale(s, sch.sigma(t).powi(2))?;
    let sum = tape.add(x, scaled)?;
    Ok(tape.scale(sum, 1.0 / sch.signal(t))?)
}

/// One reverse step from `t` to `t - 1`, re-evaluating the score at `x`.
pub fn denoise_step<S: ScoreModel + ?Sized>(
    x: &Tensor,
    t: usize,
    score: &S,
    mode: SamplerMode,
    rngs: &mut [StreamRng],
) -> Result<Tensor, DiffusionError> {
    score.schedule().check_step(t, 1)?;
    let s = score.score(x, t)?;
    denoise_step_with_score(x, &s, t, score.schedule(), mode, rngs)
}

/// Reverse step given an already evaluated score `s = score(x, t)`.
pub fn denoise_step_with_score(
    x: &Tensor,
    s: &Tensor,
    t: usize,
    sch: &NoiseSchedule,
    mode: SamplerMode,
    rngs: &mut [StreamRng],
) -> Result<Tensor, DiffusionError> {
    sch.check_step(t, 1)?;
    let (sig_t, sig_p) = (sch.sigma(t), sch.sigma(t - 1));
    let (a_t, a_p) = (sch.signal(t), sch.signal(t - 1));
    match mode {
        SamplerMode::Ode => Ok(x.zip_map(s, "denoise_step", |xv, sv| {
            let x0 = (xv + sig_t * sig_t * sv) / a_t;
            let eps = -sig_t * sv;
            a_p * x0 + sig_p * eps
        })?),
        SamplerMode::Ancestral => {
            check_streams(x.rows(), rngs)?;
            let ratio = a_t / a_p;
            let trans_var = sig_t * sig_t - ratio * ratio * sig_p * sig_p;
            let std = (trans_var * sig_p * sig_p).sqrt() / sig_t;
            let z = normal_rows(rngs, x.cols());
            let mut out = x.zip_map(s, "denoise_step", |xv, sv| {
                let x0 = (xv + sig_t * sig_t * sv) / a_t;
                (a_p * trans_var * x0 + ratio * sig_p * sig_p * xv) / (sig_t * sig_t)
            })?;
            out.axpy(std, &z.reshape(out.shape())?)?;
            Ok(out)
        }
    }
}

/// Differentiable deterministic reverse step.
pub fn denoise_step_tape<S: ScoreModel + ?Sized>(
    tape: &mut Tape,
    x: Var,
    t: usize,
    score: &S,
) -> Result<Var, DiffusionError> {
    let sch = score.schedule();
    sch.check_step(t, 1)?;
    let x0 = tweedie_tape(tape, x, t, score)?;
    let s = score.score_tape(tape, x, t)?;
    let a = tape.scale(x0, sch.signal(t - 1))?;
    let b = tape.scale(s, -sch.sigma(t) * sch.sigma(t - 1))?;
    Ok(tape.add(a, b)?)
}

/// Unguided sampling of `rngs.len()` chains from `x_T` down to `x_0`.
pub fn sample_prior<S: ScoreModel + ?Sized>(
    score: &S,
    rngs: &mut [StreamRng],
    mode: SamplerMode,
) -> Result<Tensor, DiffusionError> {
    if rngs.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let sch = score.schedule();
    let mut x = normal_rows(rngs, score.dim()).scale(sch.terminal_std());
    for t in (1..=sch.steps()).rev() {
        x = denoise_step(&x, t, score, mode, rngs)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{stream_rng, NumericsError};

    struct Zero(NoiseSchedule);

    impl ScoreModel for Zero {
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn dim(&self) -> usize {
            2
        }
        fn score(&self, x: &Tensor, _t: usize) -> Result<Tensor, NumericsError> {
            Ok(Tensor::zeros(x.shape()))
        }
        fn score_tape(&self, tape: &mut Tape, x: Var, _t: usize) -> Result<Var, NumericsError> {
            tape.scale(x, 0.0)
        }
    }

    #[test]
    fn t_zero_returns_input() {
        let sch = NoiseSchedule::variance_preserving(100, 0.1, 20.0).unwrap();
        let x0 = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let mut r = vec![stream_rng(0, 0)];
        assert_eq!(forward_noise(&x0, 0, &sch, &mut r).unwrap(), x0);
        assert!(forward_noise(&x0, 101, &sch, &mut r).is_err());
    }

    #[test]
    fn ve_noise_std_matches_sigma() {
        let sch = NoiseSchedule::from_parts(
            super::super::ScheduleKind::VarianceExploding,
            vec![0.0, 1.0, 2.0],
            vec![1.0; 3],
        )
        .unwrap();
        let x0 = Tensor::zeros(&[1, 10_000]);
        let mut r = vec![stream_rng(4, 0)];
        let x = forward_noise(&x0, 2, &sch, &mut r).unwrap();
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 2.0).abs() < 0.1, "std {std}");
    }

    #[test]
    fn forward_noise_is_seeded() {
        let sch = NoiseSchedule::variance_preserving(10, 0.1, 20.0).unwrap();
        let x0 = Tensor::zeros(&[2, 3]);
        let a = forward_noise(&x0, 5, &sch, &mut [stream_rng(1, 0), stream_rng(1, 1)]).unwrap();
        let b = forward_noise(&x0, 5, &sch, &mut [stream_rng(1, 0), stream_rng(1, 1)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_score_tweedie_is_identity_for_ve() {
        let sch = NoiseSchedule::variance_exploding(10, 0.1, 5.0).unwrap();
        let m = Zero(sch);
        let x = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        assert_eq!(tweedie_estimate(&x, 4, &m).unwrap(), x);
        assert!(tweedie_estimate(&x, 0, &m).is_err());
    }

    #[test]
    fn zero_score_ode_step_is_rescaling() {
        let ve = Zero(NoiseSchedule::variance_exploding(10, 0.1, 5.0).unwrap());
        let x = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        assert_eq!(denoise_step(&x, 3, &ve, SamplerMode::Ode, &mut []).unwrap(), x);
        let vp = Zero(NoiseSchedule::variance_preserving(10, 0.1, 20.0).unwrap());
        let y = denoise_step(&x, 3, &vp, SamplerMode::Ode, &mut []).unwrap();
        let k = (vp.0.alpha_bar(2) / vp.0.alpha_bar(3)).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - k * b).abs() < 1e-12);
        }
        assert!(denoise_step(&x, 0, &vp, SamplerMode::Ode, &mut []).is_err());
    }
}
