use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::GlyphDataset;
use super::metrics::{kl_to_prior, w2_to_prior, ColorPrior, MIN_CONSISTENCY_SAMPLES};
use super::BenchError;
use crate::numerics::{stream_rng, Tensor};
use crate::subject::{
    estimate_background_raw, fiber_losses_to, nearest_neighbor_baseline, FiberTarget, RgbImage,
    SubjectModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub n: usize,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl LossStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            median: median(values),
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub method: LossStats,
    pub baseline: LossStats,
    /// Median fiber loss of each target's samples.
    pub per_target_median: Vec<f64>,
    /// Nearest-neighbor fiber loss of each target.
    pub baseline_per_target: Vec<f64>,
}

impl FidelityReport {
    /// Fraction of targets whose sample median beats the nearest neighbor.
    pub fn win_rate(&self) -> f64 {
        let wins = self
            .per_target_median
            .iter()
            .zip(&self.baseline_per_target)
            .filter(|(m, b)| m < b)
            .count();
        wins as f64 / self.per_target_median.len() as f64
    }
}

/// Fiber-loss statistics of `samples[i]` (rows) against `targets[i]`, with the
/// nearest-neighbor baseline over `dataset` on the same targets.
pub fn eval_fidelity(
    subject: &dyn SubjectModel,
    targets: &[FiberTarget],
    samples: &[Tensor],
    dataset: &Tensor,
) -> Result<FidelityReport, BenchError> {
    if targets.is_empty() || targets.len() != samples.len() {
        return Err(BenchError::Config(format!(
            "{} targets but {} sample sets",
            targets.len(),
            samples.len()
        )));
    }
    let mut all = Vec::new();
    let mut per_target_median = Vec::with_capacity(targets.len());
    let mut baseline_per_target = Vec::with_capacity(targets.len());
    for (t, s) in targets.iter().zip(samples) {
        if s.is_empty() {
            return Err(BenchError::Empty("sample set"));
        }
        let losses = fiber_losses_to(subject, &t.h, s)?;
        per_target_median.push(median(&losses));
        all.extend(losses);
        baseline_per_target.push(nearest_neighbor_baseline(subject, t, dataset)?.loss);
    }
    Ok(FidelityReport {
        method: LossStats::from_values(&all),
        baseline: LossStats::from_values(&baseline_per_target),
        per_target_median,
        baseline_per_target,
    })
}

/// Recovered-color statistics per channel; KL is summed over channels in
/// `kl_sum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub kl: [f64; 3],
    pub kl_sum: f64,
    pub w2: [f64; 3],
    pub n: usize,
    pub low_sample_warning: bool,
}

pub fn recovered_colors(samples: &Tensor, h: usize, w: usize) -> Result<Vec<[f64; 3]>, BenchError> {
    if samples.cols() != 3 * h * w {
        return Err(BenchError::Config(format!(
            "samples have {} features, {h}x{w} images need {}",
            samples.cols(),
            3 * h * w
        )));
    }
    (0..samples.rows())
        .map(|i| Ok(estimate_background_raw(&RgbImage::new(h, w, samples.row(i).to_vec())?)))
        .collect()
}

pub fn consistency_of_colors(colors: &[[f64; 3]], prior: &ColorPrior) -> ConsistencyReport {
    let mut kl = [0.0; 3];
    let mut w2 = [0.0; 3];
    for ch in 0..3 {
        let v: Vec<f64> = colors.iter().map(|c| c[ch]).collect();
        kl[ch] = kl_to_prior(&v, prior);
        w2[ch] = w2_to_prior(&v, prior);
    }
    ConsistencyReport {
        kl,
        kl_sum: kl.iter().sum(),
        w2,
        n: colors.len(),
        low_sample_warning: colors.len() < MIN_CONSISTENCY_SAMPLES,
    }
}

/// KL and W2 of the border-median colors of `samples` (rows are planar
/// `h x w` images) against `prior`.
pub fn eval_consistency(
    samples: &Tensor,
    h: usize,
    w: usize,
    prior: &ColorPrior,
) -> Result<ConsistencyReport, BenchError> {
    Ok(consistency_of_colors(&recovered_colors(samples, h, w)?, prior))
}

/// Generator of samples on the fiber of each target.
pub trait FiberModel: Sync {
    fn name(&self) -> String;
    /// One row per target.
    fn sample(&self, targets: &[FiberTarget], seed: u64) -> Result<Tensor, BenchError>;
}

/// Returns a random dataset item whose embedding matches the target within
/// `1e-9`, or the nearest item when none does.
pub struct OracleResampler<'a> {
    pub subject: &'a dyn SubjectModel,
    pub dataset: &'a Tensor,
    embeddings: Tensor,
}

impl<'a> OracleResampler<'a> {
    pub fn new(subject: &'a dyn SubjectModel, dataset: &'a Tensor) -> Result<Self, BenchError> {
        let embeddings = subject.embed(dataset)?;
        Ok(Self {
            subject,
            dataset,
            embeddings,
        })
    }
}

impl FiberModel for OracleResampler<'_> {
    fn name(&self) -> String {
        "oracle-resampler".into()
    }

    fn sample(&self, targets: &[FiberTarget], seed: u64) -> Result<Tensor, BenchError> {
        let mut rows = Vec::with_capacity(targets.len());
        for (i, t) in targets.iter().enumerate() {
            let d: Vec<f64> = (0..self.embeddings.rows())
                .map(|j| {
                    self.embeddings
                        .row(j)
                        .iter()
                        .zip(t.h.data())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                })
                .collect();
            let hits: Vec<usize> = (0..d.len()).filter(|&j| d[j].sqrt() <= 1e-9).collect();
            let pick = if hits.is_empty() {
                (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).ok_or(BenchError::Empty("dataset"))?
            } else {
                hits[stream_rng(seed, i as u64).random_range(0..hits.len())]
            };
            rows.push(self.dataset.row(pick));
        }
        Ok(Tensor::stack_rows(&rows)?)
    }
}

/// Ignores the target and always returns one image.
pub struct ConstantModel(pub Tensor);

impl FiberModel for ConstantModel {
    fn name(&self) -> String {
        "constant".into()
    }

    fn sample(&self, targets: &[FiberTarget], _seed: u64) -> Result<Tensor, BenchError> {
        let row = self.0.data();
        Ok(Tensor::stack_rows(&vec![row; targets.len()])?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub consistency: ConsistencyReport,
    /// RMS difference between per-pixel means of samples and dataset.
    pub pixel_mean_distance: f64,
    /// RMS difference between per-pixel standard deviations.
    pub pixel_std_distance: f64,
    /// Fiber-loss statistics of the pooled samples against their targets.
    pub fidelity: LossStats,
}

fn pixel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..x.rows() {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for i in 0..x.rows() {
        for j in 0..d {
            var[j] += (x.row(i)[j] - mean[j]).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Draws `n` items `x'` from `dataset`, samples the model at `h = phi(x')`
/// and compares the pooled samples with the dataset.
pub fn eval_marginal_consistency(
    model: &dyn FiberModel,
    subject: &dyn SubjectModel,
    dataset: &GlyphDataset,
    n: usize,
    seed: u64,
) -> Result<MarginalReport, BenchError> {
    if dataset.is_empty() {
        return Err(BenchError::Empty("dataset"));
    }
    let mut rng = stream_rng(seed, u64::MAX);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..dataset.len())).collect();
    let targets = idx
        .iter()
        .map(|&i| FiberTarget::from_origin(subject, &dataset.image_tensor(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let samples = model.sample(&targets, seed)?;
    let data = dataset.to_tensor();
    let (dm, ds) = pixel_moments(&data);
    let (sm, ss) = pixel_moments(&samples);
    let mut losses = Vec::with_capacity(n);
    for (i, t) in targets.iter().enumerate() {
        losses.extend(fiber_losses_to(subject, &t.h, &samples.row_tensor(i))?);
    }
    Ok(MarginalReport {
        consistency: eval_consistency(&samples, dataset.h, dataset.w, &ColorPrior::default())?,
        pixel_mean_distance: rms(&sm, &dm),
        pixel_std_distance: rms(&ss, &ds),
        fidelity: LossStats::from_values(&losses),
    })
}
