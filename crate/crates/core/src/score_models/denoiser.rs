use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScoreModelError;
use crate::diffusion::{dsm_loss, NoiseSchedule, ScoreModel};
use crate::numerics::{Activation, AdamState, Mlp, NumericsError, StreamRng, Tape, Tensor, Var};

/// Number of sinusoidal time features.
pub const TIME_FEATURES: usize = 16;

/// `sin`/`cos` of `π 2^k s` for `k = 0..8`, `s` in `[0, 1]`.
pub fn time_features(s: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let a = PI * (1u32 << k) as f64 * s;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    out
}

/// Appends per-row time features to `x`.
pub fn with_time_features(x: &Tensor, s: &[f64]) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(n * (d + TIME_FEATURES));
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.extend_from_slice(&time_features(s[i]));
    }
    Tensor::matrix(n, d + TIME_FEATURES, data).expect("shape")
}

/// What the denoiser network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    #[default]
    Epsilon,
    Score,
}

impl Parameterization {
    pub fn tag(self) -> &'static str {
        match self {
            Parameterization::Epsilon => "epsilon",
            Parameterization::Score => "score",
        }
    }
}

/// `score = −eps / sigma`.
pub fn eps_to_score(eps: &Tensor, sigma: f64) -> Tensor {
    eps.scale(-1.0 / sigma)
}

/// `eps = −sigma · score`.
pub fn score_to_eps(score: &Tensor, sigma: f64) -> Tensor {
    score.scale(-sigma)
}

/// Eigenvalue floor applied when fitting a skip to data.
pub const SKIP_EIG_FLOOR: f64 = 1e-4;

/// Closed-form denoiser of Gaussian data `N(mean, V diag(eigvals) Vᵀ)`; a
/// denoiser with a skip learns only the residual score on top of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSkip {
    mean: Vec<f64>,
    eigvals: Vec<f64>,
    /// Row-major `d x d`, eigenvectors in columns.
    eigvecs: Vec<f64>,
}

impl GaussianSkip {
    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Self {
        let mut eigvecs = vec![0.0; dim * dim];
        for i in 0..dim {
            eigvecs[i * dim + i] = 1.0;
        }
        Self {
            mean: vec![mean; dim],
            eigvals: vec![var; dim],
            eigvecs,
        }
    }

    /// Mean and covariance of the rows of `data`, eigenvalues clamped below
    /// at `floor`.
    pub fn fit(data: &Tensor, floor: f64) -> Result<Self, ScoreModelError> {
        let (n, d) = (data.rows(), data.cols());
        if n < 2 {
            return Err(ScoreModelError::EmptyDataset);
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut centered = data.clone();
        for i in 0..n {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let cov = centered.transpose().matmul(&centered)?.scale(1.0 / (n - 1) as f64);
        let eig = nalgebra::DMatrix::from_row_slice(d, d, cov.data()).symmetric_eigen();
        let eigvals = eig.eigenvalues.iter().map(|&l| l.max(floor)).collect();
        let mut eigvecs = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                eigvecs[r * d + c] = eig.eigenvectors[(r, c)];
            }
        }
        Ok(Self {
            mean,
            eigvals,
            eigvecs,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    fn basis(&self) -> Tensor {
        let d = self.dim();
        Tensor::matrix(d, d, self.eigvecs.clone()).expect("square basis")
    }

    /// `mean` in eigen-coordinates.
    fn projected_mean(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|c| (0..d).map(|r| self.mean[r] * self.eigvecs[r * d + c]).sum())
            .collect()
    }

    /// Per-eigendirection `(1 / (a² λ + σ²), a)` at step `t`.
    fn gains(&self, schedule: &NoiseSchedule, t: usize) -> (Vec<f64>, f64) {
        let a = schedule.signal(t);
        let s2 = schedule.sigma(t).powi(2);
        (self.eigvals.iter().map(|l| 1.0 / (a * a * l + s2)).collect(), a)
    }

    /// Score of rows of `x` at per-row steps `ts`.
    pub fn score_rows(&self, x: &Tensor, schedule: &NoiseSchedule, ts: &[usize]) -> Result<Tensor, NumericsError> {
        let v = self.basis();
        let pm = self.projected_mean();
        let mut y = x.matmul(&v)?;
        for (i, &t) in ts.iter().enumerate() {
            let (k, a) = self.gains(schedule, t);
            for (j, val) in y.row_mut(i).iter_mut().enumerate() {
                *val = (*val - a * pm[j]) * k[j];
            }
        }
        Ok(y.matmul(&v.transpose())?.scale(-1.0))
    }

    pub fn score(&self, x: &Tensor, schedule: &NoiseSchedule, t: usize) -> Result<Tensor, NumericsError> {
        self.score_rows(x, schedule, &vec![t; x.rows()])
    }

    pub fn score_tape(&self, tape: &mut Tape, x: Var, schedule: &NoiseSchedule, t: usize) -> Result<Var, NumericsError> {
        let n = tape.value(x).rows();
        let v = self.basis();
        let (k, a) = self.gains(schedule, t);
        let off: Vec<f64> = self.projected_mean().iter().map(|m| -a * m).collect();
        let vc = tape.constant(v.clone());
        let y = tape.matmul(x, vc)?;
        let oc = tape.constant(Tensor::vector(off));
        let y = tape.add_row(y, oc)?;
        let y = tape.mul_const(y, Tensor::matrix(n, k.len(), k.repeat(n))?)?;
        let vt = tape.constant(v.transpose());
        let z = tape.matmul(y, vt)?;
        tape.scale(z, -1.0)
    }
}

/// Sidecar file holding the skip of the checkpoint at `path`.
pub fn skip_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".skip.json");
    name.into()
}

/// MLP denoiser over `(x_t, time features)` bound to a schedule.
#[derive(Debug, Clone)]
pub struct LearnedDenoiser {
    net: Mlp,
    schedule: NoiseSchedule,
    param: Parameterization,
    skip: Option<GaussianSkip>,
}

impl LearnedDenoiser {
    pub fn new(
        net: Mlp,
        schedule: NoiseSchedule,
        param: Parameterization,
    ) -> Result<Self, ScoreModelError> {
        if net.input_dim() != net.output_dim() + TIME_FEATURES {
            return Err(ScoreModelError::InvalidArch(format!(
                "denoiser net maps {} -> {}, expected d + {TIME_FEATURES} -> d",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            schedule,
            param,
            skip: None,
        })
    }

    pub fn with_skip(mut self, skip: Option<GaussianSkip>) -> Self {
        self.skip = skip;
        self
    }

    pub fn skip(&self) -> Option<&GaussianSkip> {
        self.skip.as_ref()
    }

    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        arch: &ArchSpec,
        schedule: NoiseSchedule,
        param: Parameterization,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![dim + TIME_FEATURES];
        dims.extend(&arch.hidden);
        dims.push(dim);
        Self::new(Mlp::init(&dims, arch.activation, rng), schedule, param).expect("dims chain")
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    pub fn time_fraction(&self, t: usize) -> f64 {
        t as f64 / self.schedule.steps() as f64
    }

    /// Raw network output for rows at per-row steps `ts`.
    pub fn raw_output(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor, NumericsError> {
        let s: Vec<f64> = ts.iter().map(|&t| self.time_fraction(t)).collect();
        self.net.forward(&with_time_features(x, &s))
    }

    /// Converts a raw output at step `t` to the network's share of the
    /// score (the full score without a skip).
    pub fn output_to_score(&self, out: &Tensor, t: usize) -> Tensor {
        match self.param {
            Parameterization::Epsilon => eps_to_score(out, self.schedule.sigma(t)),
            Parameterization::Score => out.clone(),
        }
    }

    /// Converts a raw output at step `t` to the network's share of the noise
    /// prediction.
    pub fn output_to_eps(&self, out: &Tensor, t: usize) -> Tensor {
        match self.param {
            Parameterization::Epsilon => out.clone(),
            Parameterization::Score => score_to_eps(out, self.schedule.sigma(t)),
        }
    }

    /// Noise prediction of the skip path for rows at steps `ts`, if any.
    pub fn skip_eps(&self, x: &Tensor, ts: &[usize]) -> Result<Option<Tensor>, NumericsError> {
        let Some(skip) = &self.skip else {
            return Ok(None);
        };
        let sigmas: Vec<f64> = ts.iter().map(|&t| -self.schedule.sigma(t)).collect();
        let mut out = skip.score_rows(x, &self.schedule, ts)?;
        for (i, s) in sigmas.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        Ok(Some(out))
    }

    /// Writes the network as `FLB1` to `path` and the skip, if any, as JSON
    /// to [`skip_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<(), ScoreModelError> {
        crate::numerics::checkpoint::save_mlp(&self.net, path)?;
        let side = skip_path(path);
        match &self.skip {
            Some(skip) => {
                let json = serde_json::to_vec(skip).map_err(|e| ScoreModelError::InvalidArch(e.to_string()))?;
                std::fs::write(side, json).map_err(NumericsError::Io)?;
            }
            None if side.exists() => std::fs::remove_file(side).map_err(NumericsError::Io)?,
            None => {}
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`LearnedDenoiser::save`].
    pub fn load(
        path: &Path,
        schedule: NoiseSchedule,
        param: Parameterization,
    ) -> Result<Self, ScoreModelError> {
        let m = Self::new(crate::numerics::checkpoint::load_mlp(path)?, schedule, param)?;
        let side = skip_path(path);
        if !side.exists() {
            return Ok(m);
        }
        let bytes = std::fs::read(&side).map_err(NumericsError::Io)?;
        let skip: GaussianSkip = serde_json::from_slice(&bytes)
            .map_err(|e| ScoreModelError::InvalidArch(format!("{}: {e}", side.display())))?;
        if skip.dim() != m.dim() || skip.eigvals.len() != skip.dim() || skip.eigvecs.len() != skip.dim().pow(2) {
            return Err(ScoreModelError::InvalidArch(format!(
                "{}: skip does not match a {}-dimensional net",
                side.display(),
                m.dim()
            )));
        }
        Ok(m.with_skip(Some(skip)))
    }
}

impl ScoreModel for LearnedDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn score(&self, x: &Tensor, t: usize) -> Result<Tensor, NumericsError> {
        let out = self.raw_output(x, &vec![t; x.rows()])?;
        let s = self.output_to_score(&out, t);
        match &self.skip {
            Some(skip) => s.add(&skip.score(x, &self.schedule, t)?),
            None => Ok(s),
        }
    }

    fn score_tape(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var, NumericsError> {
        let n = tape.value(x).rows();
        let feats = Tensor::matrix(
            n,
            TIME_FEATURES,
            time_features(self.time_fraction(t)).repeat(n),
        )?;
        let f = tape.constant(feats);
        let inp = tape.concat_cols(&[x, f])?;
        let out = self.net.forward_tape(tape, inp)?;
        let s = match self.param {
            Parameterization::Epsilon => tape.scale(out, -1.0 / self.schedule.sigma(t))?,
            Parameterization::Score => out,
        };
        match &self.skip {
            Some(skip) => {
                let g = skip.score_tape(tape, x, &self.schedule, t)?;
                tape.add(s, g)
            }
            None => Ok(s),
        }
    }
}

/// Hidden-layer widths and activation of a denoiser network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Fit a Gaussian skip path to the training data; ignored by
    /// conditional models.
    pub skip: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            activation: Activation::Silu,
            skip: false,
        }
    }
}

/// Optimization settings shared by the training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`, reached linearly.
    pub lr_final_frac: f64,
    /// Exponential moving average of the weights; `0` disables it.
    pub ema: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            lr: 1e-3,
            lr_final_frac: 0.1,
            ema: 0.999,
        }
    }
}

impl TrainSpec {
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.steps.max(1) as f64;
        self.lr * (1.0 - (1.0 - self.lr_final_frac) * frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub fiber_loss_component: f64,
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub skipped: usize,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,fiber_loss_component")?;
        for r in &self.rows {
            writeln!(w, "{},{:.9e},{:.9e}", r.step, r.loss, r.fiber_loss_component)?;
        }
        Ok(())
    }

    pub fn final_loss(&self, window: usize) -> f64 {
        let n = self.rows.len();
        let tail = &self.rows[n.saturating_sub(window)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

pub(crate) const DIVERGENCE_LIMIT: f64 = 1e6;

pub(crate) fn ema_update(ema: &mut Mlp, net: &Mlp, decay: f64) {
    let src: Vec<Tensor> = net.params().into_iter().cloned().collect();
    for (e, s) in ema.params_mut().into_iter().zip(&src) {
        for (a, b) in e.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

pub(crate) fn minibatch(data: &Tensor, size: usize, rng: &mut StreamRng) -> Tensor {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.rows())).collect();
    data.select_rows(&idx)
}

pub(crate) fn minibatch_pair(
    a: &Tensor,
    b: &Tensor,
    size: usize,
    rng: &mut StreamRng,
) -> (Tensor, Tensor) {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..a.rows())).collect();
    (a.select_rows(&idx), b.select_rows(&idx))
}

/// Trains an unconditional denoiser on the rows of `data` by denoising
/// score matching.
pub fn train_prior(
    data: &Tensor,
    schedule: &NoiseSchedule,
    arch: &ArchSpec,
    param: Parameterization,
    spec: &TrainSpec,
    rng: &mut StreamRng,
) -> Result<(LearnedDenoiser, TrainTrace), ScoreModelError> {
    if data.rows() == 0 {
        return Err(ScoreModelError::EmptyDataset);
    }
    let mut model = LearnedDenoiser::init(data.cols(), arch, schedule.clone(), param, rng);
    if arch.skip {
        model.skip = Some(GaussianSkip::fit(data, SKIP_EIG_FLOOR)?);
    }
    let mut ema = model.net.clone();
    let mut adam = AdamState::new(model.net.params(), spec.lr);
    let mut trace = TrainTrace::default();
    for step in 0..spec.steps {
        let batch = minibatch(data, spec.batch_size, rng);
        let out = match dsm_loss(&model, &batch, rng) {
            Ok(o) => o,
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
            fiber_loss_component: 0.0,
        });
        if !(out.loss <= DIVERGENCE_LIMIT) {
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
