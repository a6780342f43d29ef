use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;

pub const KL_BINS: usize = 64;
pub const KL_SMOOTHING: f64 = 1e-8;
/// Sample count below which consistency reports carry a warning flag.
pub const MIN_CONSISTENCY_SAMPLES: usize = 500;

/// One-dimensional Gaussian mixture restricted to `[0, 1)`, the per-channel
/// background-color prior of the glyph benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPrior {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

impl Default for ColorPrior {
    fn default() -> Self {
        Self {
            weights: vec![0.6, 0.35, 0.05],
            means: vec![0.7, 0.5, 0.1],
            stds: vec![0.08, 0.015, 0.02],
        }
    }
}

impl ColorPrior {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self, BenchError> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(BenchError::Config("color prior needs matching non-empty lists".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || stds.iter().any(|s| !(*s > 0.0)) {
            return Err(BenchError::Config("color prior weights and stds must be > 0".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(BenchError::Config("color prior weights must sum to 1".into()));
        }
        Ok(Self { weights, means, stds })
    }

    fn raw_cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| w * normal_cdf((x - m) / s))
            .sum()
    }

    fn mass(&self) -> f64 {
        self.raw_cdf(1.0) - self.raw_cdf(0.0)
    }

    /// CDF of the mixture conditioned on `[0, 1)`.
    pub fn cdf(&self, x: f64) -> f64 {
        ((self.raw_cdf(x.clamp(0.0, 1.0)) - self.raw_cdf(0.0)) / self.mass()).clamp(0.0, 1.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(0.0..1.0).contains(&x) {
            return 0.0;
        }
        let p: f64 = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| {
                let z = (x - m) / s;
                w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum();
        p / self.mass()
    }

    /// Inverse CDF by bisection to an interval width of 1e-9.
    pub fn quantile(&self, q: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Draws by rejection until the value lands in `[0, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.weights.len() {
                k += 1;
                acc += self.weights[k];
            }
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let v = self.means[k] + self.stds[k] * z;
            if (0.0..1.0).contains(&v) {
                return v;
            }
        }
    }

    /// Probability of each of `bins` equal-width bins on `[0, 1)`.
    pub fn bin_masses(&self, bins: usize) -> Vec<f64> {
        (0..bins)
            .map(|b| self.cdf((b + 1) as f64 / bins as f64) - self.cdf(b as f64 / bins as f64))
            .collect()
    }
}

pub fn bin_index(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Normalized histogram on `[0, 1)`; values outside are clamped into the
/// edge bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        h[bin_index(v, bins)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let z = 1.0 + KL_SMOOTHING * p.len() as f64;
    p.iter().map(|v| (v + KL_SMOOTHING) / z).collect()
}

/// `KL(p ‖ q)` in nats after additive smoothing of both histograms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (smooth(p), smooth(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Histogram KL of `values` against `prior` with [`KL_BINS`] bins.
pub fn kl_to_prior(values: &[f64], prior: &ColorPrior) -> f64 {
    kl_divergence(&histogram(values, KL_BINS), &prior.bin_masses(KL_BINS))
}

/// Quantile-matching estimate of `W2(empirical, prior)`.
pub fn w2_to_prior(values: &[f64], prior: &ColorPrior) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let s: f64 = v
        .iter()
        .enumerate()
        .map(|(i, x)| (x - prior.quantile((i as f64 + 0.5) / n)).powi(2))
        .sum();
    (s / n).sqrt()
}
