use serde::{Deserialize, Serialize};

use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VariancePreserving,
    VarianceExploding,
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VariancePreserving,
            steps: 100,
            beta_min: 0.1,
            beta_max: 20.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        match self.kind {
            ScheduleKind::VariancePreserving => {
                NoiseSchedule::variance_preserving(self.steps, self.beta_min, self.beta_max)
            }
            ScheduleKind::VarianceExploding => {
                NoiseSchedule::variance_exploding(self.steps, self.sigma_min, self.sigma_max)
            }
        }
    }
}

/// Discrete noise levels on the integer grid `0..=T`, `t = 0` clean.
///
/// `x_t = sqrt(alpha_bar_t) x_0 + sigma_t eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    sigma: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β ramp from `beta_min` to `beta_max` over normalized time,
    /// integrated exactly: `alpha_bar(s) = exp(-(beta_min s + (beta_max - beta_min) s² / 2))`.
    pub fn variance_preserving(
        steps: usize,
        beta_min: f64,
        beta_max: f64,
    ) -> Result<Self, DiffusionError> {
        if !(beta_min > 0.0 && beta_max > beta_min) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| {
                let s = t as f64 / steps as f64;
                (-(beta_min * s + 0.5 * (beta_max - beta_min) * s * s)).exp()
            })
            .collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self::from_parts(ScheduleKind::VariancePreserving, sigma, alpha_bar)
    }

    /// Geometric σ from `sigma_min` (t = 1) to `sigma_max` (t = T), σ_0 = 0.
    pub fn variance_exploding(
        steps: usize,
        sigma_min: f64,
        sigma_max: f64,
    ) -> Result<Self, DiffusionError> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        let mut sigma = vec![0.0];
        for t in 1..=steps {
            let frac = if steps == 1 {
                1.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            sigma.push(sigma_min * (sigma_max / sigma_min).powf(frac));
        }
        let alpha_bar = vec![1.0; steps + 1];
        Self::from_parts(ScheduleKind::VarianceExploding, sigma, alpha_bar)
    }

    /// Builds a schedule from explicit per-step tables, validating the
    /// monotonicity invariants.
    pub fn from_parts(
        kind: ScheduleKind,
        sigma: Vec<f64>,
        alpha_bar: Vec<f64>,
    ) -> Result<Self, DiffusionError> {
        let bad = |m: String| Err(DiffusionError::InvalidSchedule(m));
        if sigma.len() < 2 || sigma.len() != alpha_bar.len() {
            return bad(format!(
                "need at least one step and matching tables, got {} / {}",
                sigma.len(),
                alpha_bar.len()
            ));
        }
        if sigma[0].abs() > 1e-6 {
            return bad(format!("sigma_0 = {} is not ~0", sigma[0]));
        }
        if sigma.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("sigma must be strictly increasing in t".into());
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return bad("alpha_bar must lie in (0, 1]".into());
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return bad("alpha_bar must be non-increasing in t".into());
        }
        match kind {
            ScheduleKind::VariancePreserving => {
                if let Some(t) =
                    (0..sigma.len()).find(|&t| (alpha_bar[t] + sigma[t] * sigma[t] - 1.0).abs() > 1e-12)
                {
                    return bad(format!("variance-preserving identity fails at t = {t}"));
                }
            }
            ScheduleKind::VarianceExploding => {
                if alpha_bar.iter().any(|&a| a != 1.0) {
                    return bad("variance-exploding schedules need alpha_bar = 1".into());
                }
            }
        }
        Ok(Self {
            kind,
            sigma,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noisy steps `T`.
    pub fn steps(&self) -> usize {
        self.sigma.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal coefficient `sqrt(alpha_bar_t)`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// Standard deviation of `x_T` for unit-variance data.
    pub fn terminal_std(&self) -> f64 {
        let t = self.steps();
        (self.alpha_bar[t] + self.sigma[t] * self.sigma[t]).sqrt()
    }

    pub fn check_step(&self, t: usize, min: usize) -> Result<(), DiffusionError> {
        if t < min || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vp_default_invariants() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.sigma(0), 0.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(100) < 1e-4);
        for t in 0..=100 {
            assert!((s.alpha_bar(t) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ve_invariants() {
        let s = NoiseSchedule::variance_exploding(10, 0.01, 10.0).unwrap();
        assert_eq!(s.sigma(0), 0.0);
        assert!((s.sigma(1) - 0.01).abs() < 1e-15);
        assert!((s.sigma(10) - 10.0).abs() < 1e-12);
        assert!((0..=10).all(|t| s.alpha_bar(t) == 1.0));
    }

    #[test]
    fn rejects_non_monotone_tables() {
        let r = NoiseSchedule::from_parts(
            ScheduleKind::VarianceExploding,
            vec![0.0, 2.0, 1.0],
            vec![1.0; 3],
        );
        assert!(r.is_err());
        let r = NoiseSchedule::from_parts(
            ScheduleKind::VarianceExploding,
            vec![0.1, 2.0],
            vec![1.0; 2],
        );
        assert!(r.is_err());
    }
}
