use super::eval::FiberModel;
use super::BenchError;
use crate::diffusion::ScoreModel;
use crate::guidance::{guided_sample_seeded, GuidanceConfig, GuidedBatch};
use crate::numerics::{stream_rng, Tensor};
use crate::score_models::ConditionalDenoiser;
use crate::subject::{FiberTarget, SubjectModel};

/// Guided sampling from an unconditional prior.
pub struct GuidedFiberModel<'a> {
    pub score: &'a dyn ScoreModel,
    pub subject: &'a dyn SubjectModel,
    pub cfg: GuidanceConfig,
    pub threads: usize,
    pub label: String,
}

impl GuidedFiberModel<'_> {
    pub fn sample_with_logs(&self, targets: &[FiberTarget], seed: u64) -> Result<GuidedBatch, BenchError> {
        guided_sample_seeded(targets, self.subject, self.score, &self.cfg, seed, 0, self.threads)
            .map_err(|f| f.error.into())
    }
}

impl FiberModel for GuidedFiberModel<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn sample(&self, targets: &[FiberTarget], seed: u64) -> Result<Tensor, BenchError> {
        Ok(self.sample_with_logs(targets, seed)?.samples)
    }
}

/// Conditional flow model sampled with `steps` Euler steps; row `i` draws
/// its noise from stream `i` of the seed.
pub struct ConditionalFiberModel<'a> {
    pub model: &'a ConditionalDenoiser,
    pub steps: usize,
    pub label: String,
}

impl FiberModel for ConditionalFiberModel<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn sample(&self, targets: &[FiberTarget], seed: u64) -> Result<Tensor, BenchError> {
        let rows: Vec<&[f64]> = targets.iter().map(|t| t.h.data()).collect();
        let h = Tensor::stack_rows(&rows)?;
        let mut rngs: Vec<_> = (0..targets.len() as u64).map(|i| stream_rng(seed, i)).collect();
        Ok(self.model.sample(&h, &mut rngs, self.steps)?)
    }
}

/// Draws `k` samples per target with independent seeds `seed + j`, grouped
/// per target.
pub fn sample_sets(
    model: &dyn FiberModel,
    targets: &[FiberTarget],
    k: usize,
    seed: u64,
) -> Result<Vec<Tensor>, BenchError> {
    let mut sets: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(k); targets.len()];
    for j in 0..k as u64 {
        let s = model.sample(targets, seed.wrapping_add(j))?;
        for (i, set) in sets.iter_mut().enumerate() {
            set.push(s.row(i).to_vec());
        }
    }
    sets.into_iter()
        .map(|rows| Ok(Tensor::from_rows(&rows)?))
        .collect()
}
