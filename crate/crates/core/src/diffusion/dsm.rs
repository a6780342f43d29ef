use rand::Rng;

use super::{noise_with, DiffusionError, ScoreModel};
use crate::numerics::{normal_tensor, Tape, Tensor};
use crate::score_models::{with_time_features, LearnedDenoiser, Parameterization};

/// Loss value and parameter gradients in `Mlp::params_mut` order.
#[derive(Debug, Clone)]
pub struct DsmOutput {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Denoising score-matching objective at explicit steps `ts` and noise `eps`.
///
/// Mean over elements of `‖eps_pred − eps‖²`; score-parameterized models are
/// compared through `−sigma_t · score`.
pub fn dsm_objective(
    model: &LearnedDenoiser,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<DsmOutput, DiffusionError> {
    let (n, d) = (x0.rows(), x0.cols());
    if n == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let sch = model.schedule();
    let mut xt = Tensor::zeros(&[n, d]);
    for (i, &t) in ts.iter().enumerate() {
        sch.check_step(t, 1)?;
        let row = noise_with(&x0.row_tensor(i), t, sch, &eps.row_tensor(i))?;
        xt.row_mut(i).copy_from_slice(row.data());
    }
    let s: Vec<f64> = ts.iter().map(|&t| model.time_fraction(t)).collect();
    let mut tape = Tape::new();
    let params = model.net().bind(&mut tape);
    let inp = tape.constant(with_time_features(&xt, &s));
    let mut out = model.net().forward_bound(&mut tape, &params, inp)?;
    if model.parameterization() == Parameterization::Score {
        let sig = ts.iter().map(|&t| -sch.sigma(t)).collect();
        out = tape.scale_rows(out, sig)?;
    }
    let mut target = eps.clone().reshape(&[n, d])?;
    if let Some(skip) = model.skip_eps(&xt, ts)? {
        target = target.sub(&skip)?;
    }
    let target = tape.constant(target);
    let diff = tape.sub(out, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / (n * d) as f64)?;
    let mut grads = tape.backward(loss)?;
    Ok(DsmOutput {
        loss: tape.scalar_value(loss),
        grads: params.vars().map(|v| grads.take(v)).collect(),
    })
}

/// [`dsm_objective`] with steps uniform on `1..=T` and standard-normal noise.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &LearnedDenoiser,
    batch: &Tensor,
    rng: &mut R,
) -> Result<DsmOutput, DiffusionError> {
    let steps = model.schedule().steps();
    let ts: Vec<usize> = (0..batch.rows()).map(|_| rng.random_range(1..=steps)).collect();
    let eps = normal_tensor(&[batch.rows(), batch.cols()], rng);
    dsm_objective(model, batch, &ts, &eps)
}
