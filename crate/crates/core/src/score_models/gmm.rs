use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::ScoreModelError;
use crate::diffusion::{NoiseSchedule, ScoreModel};
use crate::numerics::{CustomOp, NumericsError, Tape, Tensor, Var};

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

impl GmmPrior {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<Vec<f64>>,
    ) -> Result<Self, ScoreModelError> {
        let bad = |m: String| Err(ScoreModelError::InvalidPrior(m));
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return bad("weights, means and stds need the same non-zero length".into());
        }
        let d = means[0].len();
        if d == 0 || means.iter().chain(&stds).any(|v| v.len() != d) {
            return bad("all means and stds need the same non-zero dimension".into());
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return bad("weights must be positive".into());
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("weights sum to {total}, not 1"));
        }
        if stds.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("stds must be positive and finite".into());
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return bad("means must be finite".into());
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    /// Mixture whose components share one isotropic std.
    pub fn isotropic(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        std: f64,
    ) -> Result<Self, ScoreModelError> {
        let stds = means.iter().map(|m| vec![std; m.len()]).collect();
        Self::new(weights, means, stds)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![vec![1.0; dim]]).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    pub fn std(&self, k: usize) -> &[f64] {
        &self.stds[k]
    }

    /// Index of the component for a uniform draw `u` in `[0, 1)`.
    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }

    /// Draws one sample, returning it with its component index.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let k = self.pick(rng.random::<f64>());
        let x = self.means[k]
            .iter()
            .zip(&self.stds[k])
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, k)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            data.extend(self.sample_one(rng).0);
        }
        Tensor::matrix(n, self.dim(), data).expect("shape")
    }

    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut lp = self.weights[k].ln();
            for ((xi, m), s) in x.iter().zip(&self.means[k]).zip(&self.stds[k]) {
                let z = (xi - m) / s;
                lp -= 0.5 * z * z + s.ln() + 0.5 * (2.0 * PI).ln();
            }
            *o = lp;
        }
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut lp = vec![0.0; self.components()];
        self.component_log_densities(x, &mut lp);
        let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in lp.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        lp.iter_mut().for_each(|v| *v /= total);
        lp
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut lp = vec![0.0; self.components()];
        self.component_log_densities(x, &mut lp);
        let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + lp.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    }

    /// `∇ log p(x)` for one point.
    pub fn score_point(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut s = vec![0.0; x.len()];
        for (k, rk) in r.iter().enumerate() {
            for (j, sj) in s.iter_mut().enumerate() {
                let v = self.stds[k][j] * self.stds[k][j];
                *sj += rk * (self.means[k][j] - x[j]) / v;
            }
        }
        s
    }

    /// The law of `x_t = sqrt(alpha_bar_t) x_0 + sigma_t eps` for `x_0` from this mixture.
    pub fn noised(&self, schedule: &NoiseSchedule, t: usize) -> Self {
        let (a, sig) = (schedule.signal(t), schedule.sigma(t));
        Self {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| a * v).collect())
                .collect(),
            stds: self
                .stds
                .iter()
                .map(|s| s.iter().map(|v| (a * a * v * v + sig * sig).sqrt()).collect())
                .collect(),
        }
    }
}

/// Exact score of the noised mixture at step `t` for each row of `x`.
pub fn gmm_score(
    prior: &GmmPrior,
    x: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor, ScoreModelError> {
    schedule.check_step(t, 0)?;
    Ok(score_rows(&prior.noised(schedule, t), x)?)
}

fn score_rows(p: &GmmPrior, x: &Tensor) -> Result<Tensor, NumericsError> {
    if x.cols() != p.dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "gmm_score",
            expected: format!("{} columns", p.dim()),
            actual: format!("{:?}", x.shape()),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let s = p.score_point(x.row(i));
        out.row_mut(i).copy_from_slice(&s);
    }
    Ok(out)
}

/// Analytic [`ScoreModel`] for a Gaussian-mixture prior.
#[derive(Debug, Clone)]
pub struct AnalyticGmmScore {
    prior: GmmPrior,
    schedule: NoiseSchedule,
    noised: Vec<Arc<GmmPrior>>,
}

impl AnalyticGmmScore {
    pub fn new(prior: GmmPrior, schedule: NoiseSchedule) -> Self {
        let noised = (0..=schedule.steps())
            .map(|t| Arc::new(prior.noised(&schedule, t)))
            .collect();
        Self {
            prior,
            schedule,
            noised,
        }
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }
}

struct GmmScoreVjp(Arc<GmmPrior>);

impl CustomOp for GmmScoreVjp {
    fn name(&self) -> &'static str {
        "gmm_score"
    }

    // The score Jacobian is symmetric:
    // J = Σ r_k (g_k g_kᵀ − diag(1/v_k)) − s sᵀ, with g_k = (m_k − x)/v_k.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let p = &self.0;
        let x = inputs[0];
        let mut out = Tensor::zeros(x.shape());
        let d = p.dim();
        let mut gk = vec![0.0; d];
        for i in 0..x.rows() {
            let xi = x.row(i);
            let gi = grad.row(i);
            let si = output.row(i);
            let r = p.responsibilities(xi);
            let sg: f64 = si.iter().zip(gi).map(|(a, b)| a * b).sum();
            let oi = out.row_mut(i);
            for (k, rk) in r.iter().enumerate() {
                let mut dot = 0.0;
                for j in 0..d {
                    let v = p.stds[k][j] * p.stds[k][j];
                    gk[j] = (p.means[k][j] - xi[j]) / v;
                    dot += gk[j] * gi[j];
                    oi[j] -= rk * gi[j] / v;
                }
                for j in 0..d {
                    oi[j] += rk * gk[j] * dot;
                }
            }
            for j in 0..d {
                oi[j] -= si[j] * sg;
            }
        }
        vec![out]
    }
}

impl ScoreModel for AnalyticGmmScore {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn score(&self, x: &Tensor, t: usize) -> Result<Tensor, NumericsError> {
        score_rows(&self.noised[t], x)
    }

    fn score_tape(&self, tape: &mut Tape, x: Var, t: usize) -> Result<Var, NumericsError> {
        let value = score_rows(&self.noised[t], tape.value(x))?;
        tape.custom(&[x], value, Box::new(GmmScoreVjp(self.noised[t].clone())))
    }
}
