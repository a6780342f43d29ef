use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{ema_update, minibatch_pair, DIVERGENCE_LIMIT};
use super::{time_features, ArchSpec, ScoreModelError, TraceRow, TrainSpec, TrainTrace, TIME_FEATURES};
use crate::numerics::{
    normal_rows, normal_tensor, stream_rng, AdamState, BoundParams, Mlp, NumericsError,
    StreamRng, Tape, Tensor, Var,
};
use crate::subject::SubjectModel;

/// Velocity model `v(x_s, s, h)` for the straight path
/// `x_s = (1 − s) x_0 + s eps`, integrated from `s = 1` to `s = 0`.
#[derive(Debug, Clone)]
pub struct ConditionalDenoiser {
    net: Mlp,
    dim: usize,
    cond_dim: usize,
}

fn cond_input(x: &Tensor, s: f64, h: &Tensor) -> Tensor {
    let (n, d, dh) = (x.rows(), x.cols(), h.cols());
    let f = time_features(s);
    let mut data = Vec::with_capacity(n * (d + TIME_FEATURES + dh));
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.extend_from_slice(&f);
        data.extend_from_slice(h.row(i));
    }
    Tensor::matrix(n, d + TIME_FEATURES + dh, data).expect("shape")
}

fn per_row_input(x: &Tensor, s: &[f64], h: &Tensor) -> Tensor {
    let (n, d, dh) = (x.rows(), x.cols(), h.cols());
    let mut data = Vec::with_capacity(n * (d + TIME_FEATURES + dh));
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.extend_from_slice(&time_features(s[i]));
        data.extend_from_slice(h.row(i));
    }
    Tensor::matrix(n, d + TIME_FEATURES + dh, data).expect("shape")
}

impl ConditionalDenoiser {
    pub fn new(net: Mlp, cond_dim: usize) -> Result<Self, ScoreModelError> {
        let dim = net.output_dim();
        if net.input_dim() != dim + TIME_FEATURES + cond_dim {
            return Err(ScoreModelError::InvalidArch(format!(
                "conditional net takes {} inputs, expected {dim} + {TIME_FEATURES} + {cond_dim}",
                net.input_dim()
            )));
        }
        Ok(Self { net, dim, cond_dim })
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, cond_dim: usize, arch: &ArchSpec, rng: &mut R) -> Self {
        let mut dims = vec![dim + TIME_FEATURES + cond_dim];
        dims.extend(&arch.hidden);
        dims.push(dim);
        Self::new(Mlp::init(&dims, arch.activation, rng), cond_dim).expect("dims chain")
    }

    /// Recovers the conditioning width from the network and the sample width.
    pub fn from_net(net: Mlp, dim: usize) -> Result<Self, ScoreModelError> {
        let cond = net
            .input_dim()
            .checked_sub(dim + TIME_FEATURES)
            .ok_or_else(|| ScoreModelError::InvalidArch("network input too narrow".into()))?;
        Self::new(net, cond)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn velocity(&self, x: &Tensor, s: f64, h: &Tensor) -> Result<Tensor, NumericsError> {
        self.net.forward(&cond_input(x, s, h))
    }

    /// Euler integration with `steps` uniform steps from noise drawn per row.
    pub fn sample(
        &self,
        h: &Tensor,
        rngs: &mut [StreamRng],
        steps: usize,
    ) -> Result<Tensor, NumericsError> {
        let h = h.as_matrix();
        if h.rows() != rngs.len() || h.cols() != self.cond_dim {
            return Err(NumericsError::ShapeMismatch {
                op: "conditional_sample",
                expected: format!("[{}, {}]", rngs.len(), self.cond_dim),
                actual: format!("{:?}", h.shape()),
            });
        }
        let mut x = normal_rows(rngs, self.dim);
        let dt = 1.0 / steps as f64;
        for k in (1..=steps).rev() {
            let v = self.velocity(&x, k as f64 * dt, &h)?;
            x.axpy(-dt, &v)?;
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        crate::numerics::checkpoint::save_mlp(&self.net, path)
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self, ScoreModelError> {
        Self::from_net(crate::numerics::checkpoint::load_mlp(path)?, dim)
    }
}

/// Settings of the fiber-loss regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberRegSpec {
    pub lambda_fiber: f64,
    /// Euler steps of the differentiable simulation.
    pub sim_steps: usize,
    /// Rows of each batch that are simulated.
    pub sim_batch: usize,
}

impl Default for FiberRegSpec {
    fn default() -> Self {
        Self {
            lambda_fiber: 0.0,
            sim_steps: 8,
            sim_batch: 16,
        }
    }
}

fn simulate_tape(
    net: &Mlp,
    tape: &mut Tape,
    params: &BoundParams,
    eps: Tensor,
    h: &Tensor,
    steps: usize,
) -> Result<Var, NumericsError> {
    let (n, d) = (eps.rows(), eps.cols());
    let mut x = tape.constant(eps);
    let hv = tape.constant(h.clone());
    let dt = 1.0 / steps as f64;
    for k in (1..=steps).rev() {
        let f = time_features(k as f64 * dt);
        let fv = tape.constant(Tensor::matrix(n, TIME_FEATURES, f.repeat(n))?);
        let inp = tape.concat_cols(&[x, fv, hv])?;
        let v = net.forward_bound(tape, params, inp)?;
        let step = tape.scale(v, -dt)?;
        x = tape.add(x, step)?;
    }
    debug_assert_eq!(tape.value(x).cols(), d);
    Ok(x)
}

struct StepLoss {
    loss: f64,
    fiber: f64,
    grads: Vec<Tensor>,
}

fn conditional_step(
    net: &Mlp,
    x0: &Tensor,
    h: &Tensor,
    subject: &dyn SubjectModel,
    reg: &FiberRegSpec,
    rng: &mut StreamRng,
    fiber_rng: &mut StreamRng,
) -> Result<StepLoss, NumericsError> {
    let (n, d) = (x0.rows(), x0.cols());
    let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let eps = normal_tensor(&[n, d], rng);
    let mut xs = Tensor::zeros(&[n, d]);
    let mut target = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            let (a, e) = (x0.row(i)[j], eps.row(i)[j]);
            xs.row_mut(i)[j] = (1.0 - s[i]) * a + s[i] * e;
            target.row_mut(i)[j] = e - a;
        }
    }
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let inp = tape.constant(per_row_input(&xs, &s, h));
    let v = net.forward_bound(&mut tape, &params, inp)?;
    let tv = tape.constant(target);
    let diff = tape.sub(v, tv)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let mut loss = tape.scale(total, 1.0 / (n * d) as f64)?;
    let mut fiber = 0.0;
    if reg.lambda_fiber > 0.0 {
        let m = reg.sim_batch.min(n);
        let idx: Vec<usize> = (0..m).collect();
        let hs = h.select_rows(&idx);
        let e0 = normal_tensor(&[m, d], fiber_rng);
        let xg = simulate_tape(net, &mut tape, &params, e0, &hs, reg.sim_steps)?;
        let emb = subject.embed_tape(&mut tape, xg)?;
        let hc = tape.constant(hs);
        let fd = tape.sub(emb, hc)?;
        let fsq = tape.square(fd)?;
        let fsum = tape.sum(fsq)?;
        let fl = tape.scale(fsum, 1.0 / m as f64)?;
        fiber = tape.scalar_value(fl);
        let weighted = tape.scale(fl, reg.lambda_fiber)?;
        loss = tape.add(loss, weighted)?;
    }
    let mut g = tape.backward(loss)?;
    Ok(StepLoss {
        loss: tape.scalar_value(loss),
        fiber,
        grads: params.vars().map(|v| g.take(v)).collect(),
    })
}

/// Conditional flow matching on `(data, embeddings)` pairs plus
/// `lambda_fiber` times the fiber loss of `sim_steps`-step simulated samples.
///
/// The regularizer draws its noise from a separate stream so that
/// `lambda_fiber = 0` reproduces plain flow matching exactly.
pub fn train_conditional(
    data: &Tensor,
    embeddings: &Tensor,
    subject: &dyn SubjectModel,
    arch: &ArchSpec,
    spec: &TrainSpec,
    reg: &FiberRegSpec,
    seed: u64,
) -> Result<(ConditionalDenoiser, TrainTrace), ScoreModelError> {
    if data.rows() == 0 {
        return Err(ScoreModelError::EmptyDataset);
    }
    if embeddings.rows() != data.rows() {
        return Err(ScoreModelError::InvalidArch(format!(
            "{} samples but {} embeddings",
            data.rows(),
            embeddings.rows()
        )));
    }
    if !(reg.lambda_fiber >= 0.0) || reg.sim_steps == 0 {
        return Err(ScoreModelError::InvalidArch(
            "need lambda_fiber >= 0 and sim_steps >= 1".into(),
        ));
    }
    let mut rng = stream_rng(seed, 0);
    let mut fiber_rng = stream_rng(seed, 1);
    let mut model = ConditionalDenoiser::init(data.cols(), embeddings.cols(), arch, &mut rng);
    let mut ema = model.net.clone();
    let mut adam = AdamState::new(model.net.params(), spec.lr);
    let mut trace = TrainTrace::default();
    for step in 0..spec.steps {
        let (x0, h) = minibatch_pair(data, embeddings, spec.batch_size, &mut rng);
        let out = match conditional_step(&model.net, &x0, &h, subject, reg, &mut rng, &mut fiber_rng) {
            Ok(o) if o.loss.is_finite() => o,
            Ok(_) | Err(NumericsError::NonFinite { .. }) if reg.lambda_fiber > 0.0 => {
                trace.skipped += 1;
                if trace.skipped * 10 > spec.steps {
                    return Err(ScoreModelError::TooManySkipped {
                        skipped: trace.skipped,
                        steps: spec.steps,
                        trace,
                    });
                }
                continue;
            }
            Ok(o) => {
                return Err(ScoreModelError::Diverged {
                    step,
                    reason: format!("loss {}", o.loss),
                    trace,
                })
            }
            Err(e) => {
                return Err(ScoreModelError::Diverged {
                    step,
                    reason: e.to_string(),
                    trace,
                })
            }
        };
        trace.rows.push(TraceRow {
            step,
            loss: out.loss,
            fiber_loss_component: out.fiber,
        });
        if out.loss > DIVERGENCE_LIMIT {
            return Err(ScoreModelError::Diverged {
                step,
                reason: format!("loss {}", out.loss),
                trace,
            });
        }
        adam.lr = spec.lr_at(step);
        adam.step(&mut model.net.params_mut(), &out.grads)?;
        if spec.ema > 0.0 {
            ema_update(&mut ema, &model.net, spec.ema);
        }
    }
    if spec.ema > 0.0 {
        model.net = ema;
    }
    Ok((model, trace))
}
