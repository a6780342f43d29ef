use super::log::{row_hash, TrajectoryLog, TrajectoryRecord};
use super::{GuidanceConfig, GuidanceError, TerminalMode};
use crate::diffusion::{denoise_step_with_score, noise_with, tweedie_tape, ScoreModel};
use crate::numerics::{normal_rows, stream_rng, NumericsError, StreamRng, Tape, Tensor, Var};
use crate::subject::{FiberTarget, SubjectModel};

/// Sampler and target-noise streams for chains `first .. first + n`.
///
/// The two kinds never share a stream, so guidance settings cannot perturb
/// the sampler's noise.
pub fn chain_rngs(seed: u64, first: u64, n: usize) -> (Vec<StreamRng>, Vec<StreamRng>) {
    let sampler = (0..n as u64).map(|i| stream_rng(seed, 2 * (first + i))).collect();
    let target = (0..n as u64).map(|i| stream_rng(seed, 2 * (first + i) + 1)).collect();
    (sampler, target)
}

fn stack(rows: Vec<&[f64]>) -> Result<Tensor, NumericsError> {
    Tensor::stack_rows(&rows)
}

fn origins(targets: &[FiberTarget]) -> Result<Tensor, GuidanceError> {
    let rows: Option<Vec<&[f64]>> = targets.iter().map(|t| t.origin.as_ref().map(|o| o.data())).collect();
    Ok(stack(rows.ok_or(GuidanceError::MissingOrigin)?)?)
}

fn tweedie_plain(x: &Tensor, s: &Tensor, t: usize, score: &dyn ScoreModel) -> Result<Tensor, NumericsError> {
    let sch = score.schedule();
    let (var, a) = (sch.sigma(t).powi(2), sch.signal(t));
    x.zip_map(s, "tweedie", |xv, sv| (xv + var * sv) / a)
}

/// Per-row terminal targets at step `t`: `h` in static mode, or
/// `phi(tweedie(sqrt(alpha_bar_t) origin + sigma_t eps))` in noised-target mode.
pub fn target_embeddings(
    targets: &[FiberTarget],
    t: usize,
    mode: TerminalMode,
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    eps: Option<&Tensor>,
) -> Result<Tensor, GuidanceError> {
    match mode {
        TerminalMode::Static => Ok(stack(targets.iter().map(|t| t.h.data()).collect())?),
        TerminalMode::NoisedTarget => {
            let x0 = origins(targets)?;
            let eps = eps.ok_or_else(|| GuidanceError::Config("noised target needs noise".into()))?;
            let xt = noise_with(&x0, t, score.schedule(), eps)?;
            let s = score.score(&xt, t)?;
            Ok(subject.embed(&tweedie_plain(&xt, &s, t, score)?)?)
        }
    }
}

fn row_sq_dists(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum())
        .collect()
}

/// Terminal loss of every row of `x_t` against its target. Noised-target
/// mode draws `x'_t` from `rngs` (one stream per row).
pub fn terminal_loss(
    x_t: &Tensor,
    t: usize,
    targets: &[FiberTarget],
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    mode: TerminalMode,
    rngs: &mut [StreamRng],
) -> Result<Vec<f64>, GuidanceError> {
    score.schedule().check_step(t, 1)?;
    let eps = match mode {
        TerminalMode::NoisedTarget => Some(normal_rows(rngs, x_t.cols())),
        TerminalMode::Static => None,
    };
    let h = target_embeddings(targets, t, mode, subject, score, eps.as_ref())?;
    let s = score.score(x_t, t)?;
    let e = subject.embed(&tweedie_plain(x_t, &s, t, score)?)?;
    Ok(row_sq_dists(&e, &h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionDiagnostics {
    /// Inner objective at `u = 0`.
    pub loss_at_zero: f64,
    /// Inner objective at the returned `u`.
    pub loss: f64,
    /// Terminal-loss part at the returned `u`.
    pub terminal_loss: f64,
    pub u_norm: f64,
    pub descent_ok: bool,
    /// An inner iterate produced a non-finite value; the best finite iterate was kept.
    pub non_finite: bool,
}

#[derive(Debug, Clone)]
pub struct CorrectionOutput {
    pub u: Tensor,
    pub diagnostics: Vec<CorrectionDiagnostics>,
}

struct Objective {
    total: Var,
    rows: Vec<f64>,
    terminal: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn inner_objective(
    tape: &mut Tape,
    u: Var,
    x: &Tensor,
    t: usize,
    gamma: f64,
    h: &Tensor,
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    kappa: f64,
    tau: f64,
    s_x: &Tensor,
) -> Result<Objective, NumericsError> {
    let xc = tape.constant(x.clone());
    let gu = tape.scale(u, gamma)?;
    let xh = tape.add(xc, gu)?;
    let x0 = tweedie_tape(tape, xh, t, score).map_err(|e| match e {
        crate::diffusion::DiffusionError::Numerics(n) => n,
        other => NumericsError::ShapeMismatch {
            op: "tweedie",
            expected: String::new(),
            actual: other.to_string(),
        },
    })?;
    let e = subject.embed_tape(tape, x0)?;
    let hc = tape.constant(h.clone());
    let term = tape.row_sq_dist(e, hc)?;
    let terminal = tape.value(term).data().to_vec();
    let usq = tape.square(u)?;
    let unorm = tape.sum_rows(usq)?;
    let ctrl = tape.scale(unorm, kappa)?;
    let mut rows = tape.add(term, ctrl)?;
    if tau > 0.0 {
        let sh = score.score_tape(tape, xh, t)?;
        let sc = tape.constant(s_x.clone());
        let dev = tape.row_sq_dist(sh, sc)?;
        let w = tape.scale(dev, tau)?;
        rows = tape.add(rows, w)?;
    }
    let row_vals = tape.value(rows).data().to_vec();
    let total = tape.sum(rows)?;
    Ok(Objective {
        total,
        rows: row_vals,
        terminal,
    })
}

/// Optimizes `u_t` for every row by `cfg.inner_steps` gradient steps on
/// `L = L_terminal(x + gamma u) + kappa ‖u‖² + tau ‖s(x + gamma u) − s(x)‖²`.
///
/// `h` holds per-row terminal targets and `s_x = score(x, t)`. Each row keeps
/// its best iterate (including `u = 0`), so the returned objective never
/// exceeds its value at zero.
#[allow(clippy::too_many_arguments)]
pub fn correction_step(
    x: &Tensor,
    t: usize,
    h: &Tensor,
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    cfg: &GuidanceConfig,
    s_x: &Tensor,
    init: Option<&Tensor>,
) -> Result<CorrectionOutput, GuidanceError> {
    let steps = score.schedule().steps();
    score.schedule().check_step(t, 1)?;
    let (n, d) = (x.rows(), x.cols());
    let gamma = cfg.gamma_at(t, steps);
    let eta = cfg.lr_at(t, steps);
    let (kappa, tau) = (cfg.kappa_at(t), cfg.tau_at(t));
    let zero = Tensor::zeros(&[n, d]);
    if gamma == 0.0 {
        let e = subject.embed(&tweedie_plain(x, s_x, t, score)?)?;
        let term = row_sq_dists(&e, h);
        return Ok(CorrectionOutput {
            u: zero,
            diagnostics: term
                .into_iter()
                .map(|l| CorrectionDiagnostics {
                    loss_at_zero: l,
                    loss: l,
                    terminal_loss: l,
                    u_norm: 0.0,
                    descent_ok: true,
                    non_finite: false,
                })
                .collect(),
        });
    }
    let eval = |u: &Tensor, want_grad: bool| -> Result<(Objective, Option<Tensor>), NumericsError> {
        let mut tape = Tape::new();
        let uv = tape.var(u.clone());
        let obj = inner_objective(&mut tape, uv, x, t, gamma, h, subject, score, kappa, tau, s_x)?;
        let g = if want_grad {
            Some(tape.backward(obj.total)?.take(uv))
        } else {
            None
        };
        Ok((obj, g))
    };
    let mut best_u = zero.clone();
    let mut best = vec![f64::INFINITY; n];
    let mut best_term = vec![f64::INFINITY; n];
    let mut at_zero = vec![f64::NAN; n];
    let mut non_finite = false;
    let mut accept = |u: &Tensor, obj: &Objective, best_u: &mut Tensor| {
        for i in 0..n {
            if obj.rows[i] < best[i] {
                best[i] = obj.rows[i];
                best_term[i] = obj.terminal[i];
                best_u.row_mut(i).copy_from_slice(u.row(i));
            }
        }
    };
    let mut u = match init {
        Some(u0) if cfg.warm_start => {
            match eval(&zero, false) {
                Ok((obj, _)) => {
                    at_zero.copy_from_slice(&obj.rows);
                    accept(&zero, &obj, &mut best_u);
                }
                Err(NumericsError::NonFinite { .. }) => non_finite = true,
                Err(e) => return Err(e.into()),
            }
            u0.clone()
        }
        _ => zero.clone(),
    };
    let warm = init.is_some() && cfg.warm_start;
    for k in 0..=cfg.inner_steps {
        let last = k == cfg.inner_steps;
        match eval(&u, !last) {
            Ok((obj, g)) => {
                if k == 0 && !warm {
                    at_zero.copy_from_slice(&obj.rows);
                }
                accept(&u, &obj, &mut best_u);
                if let Some(g) = g {
                    u.axpy(-eta, &g)?;
                }
            }
            Err(NumericsError::NonFinite { .. }) => {
                non_finite = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let unorms = best_u.row_norms_sq();
    let diagnostics = (0..n)
        .map(|i| CorrectionDiagnostics {
            loss_at_zero: at_zero[i],
            loss: best[i],
            terminal_loss: best_term[i],
            u_norm: unorms[i].sqrt(),
            descent_ok: best[i] <= at_zero[i],
            non_finite,
        })
        .collect();
    Ok(CorrectionOutput {
        u: best_u,
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct GuidedBatch {
    pub samples: Tensor,
    pub logs: Vec<TrajectoryLog>,
}

/// Error from [`guided_sample`] with the logs recorded up to the failure.
#[derive(Debug)]
pub struct GuidanceFailure {
    pub error: GuidanceError,
    pub logs: Vec<TrajectoryLog>,
}

impl std::fmt::Display for GuidanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for GuidanceFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs one guided chain per target from `x_T` to `x_0`.
///
/// Row `i` uses `sampler_rngs[i]` for its initial noise and ancestral noise,
/// and `target_rngs[i]` for noised-target draws. With every `gamma_t = 0` the
/// samples equal [`crate::diffusion::sample_prior`] on the same sampler
/// streams bit for bit.
pub fn guided_sample(
    targets: &[FiberTarget],
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    cfg: &GuidanceConfig,
    sampler_rngs: &mut [StreamRng],
    target_rngs: &mut [StreamRng],
) -> Result<GuidedBatch, GuidanceFailure> {
    let mut logs = vec![TrajectoryLog::default(); targets.len()];
    match run_guided(targets, subject, score, cfg, sampler_rngs, target_rngs, &mut logs) {
        Ok(samples) => Ok(GuidedBatch { samples, logs }),
        Err(error) => Err(GuidanceFailure { error, logs }),
    }
}

/// [`guided_sample`] on chains `first .. first + targets.len()` of `seed`,
/// split into up to `threads` contiguous batches. Chains own their streams,
/// so the result does not depend on the split.
pub fn guided_sample_seeded(
    targets: &[FiberTarget],
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    cfg: &GuidanceConfig,
    seed: u64,
    first: u64,
    threads: usize,
) -> Result<GuidedBatch, GuidanceFailure> {
    let n = targets.len();
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let run = |start: usize| {
        let part = &targets[start..(start + chunk).min(n)];
        let (mut s, mut r) = chain_rngs(seed, first + start as u64, part.len());
        guided_sample(part, subject, score, cfg, &mut s, &mut r)
    };
    if threads <= 1 || n <= chunk {
        return run(0);
    }
    let parts: Vec<_> = std::thread::scope(|sc| {
        let handles: Vec<_> = (0..n).step_by(chunk).map(|st| sc.spawn(move || run(st))).collect();
        handles.into_iter().map(|h| h.join().expect("guidance worker panicked")).collect()
    });
    let mut logs = Vec::with_capacity(n);
    let mut rows: Vec<Tensor> = Vec::new();
    let mut failure = None;
    for p in parts {
        match p {
            Ok(b) => {
                logs.extend(b.logs);
                rows.push(b.samples);
            }
            Err(f) => {
                logs.extend(f.logs);
                failure.get_or_insert(f.error);
            }
        }
    }
    if let Some(error) = failure {
        return Err(GuidanceFailure { error, logs });
    }
    let flat: Vec<&[f64]> = rows.iter().flat_map(|t| (0..t.rows()).map(move |i| t.row(i))).collect();
    let samples = Tensor::stack_rows(&flat).map_err(|e| GuidanceFailure {
        error: e.into(),
        logs: logs.clone(),
    })?;
    Ok(GuidedBatch { samples, logs })
}

fn run_guided(
    targets: &[FiberTarget],
    subject: &dyn SubjectModel,
    score: &dyn ScoreModel,
    cfg: &GuidanceConfig,
    sampler_rngs: &mut [StreamRng],
    target_rngs: &mut [StreamRng],
    logs: &mut [TrajectoryLog],
) -> Result<Tensor, GuidanceError> {
    cfg.validate()?;
    let n = targets.len();
    if n == 0 {
        return Err(crate::diffusion::DiffusionError::EmptyBatch.into());
    }
    if sampler_rngs.len() != n || target_rngs.len() != n {
        return Err(crate::diffusion::DiffusionError::StreamCount {
            rows: n,
            rngs: sampler_rngs.len().min(target_rngs.len()),
        }
        .into());
    }
    if subject.input_dim() != score.dim() {
        return Err(GuidanceError::Config(format!(
            "subject takes {} features, prior produces {}",
            subject.input_dim(),
            score.dim()
        )));
    }
    for tg in targets {
        tg.validate(subject)?;
    }
    if cfg.terminal == TerminalMode::NoisedTarget && targets.iter().any(|t| t.origin.is_none()) {
        return Err(GuidanceError::MissingOrigin);
    }
    let sch = score.schedule();
    let steps = sch.steps();
    let d = score.dim();
    let mut x = normal_rows(sampler_rngs, d).scale(sch.terminal_std());
    let shared_eps = match cfg.terminal {
        TerminalMode::NoisedTarget if cfg.shared_target_noise => Some(normal_rows(target_rngs, d)),
        _ => None,
    };
    let mut prev_u: Option<Tensor> = None;
    for t in (1..=steps).rev() {
        let eps = match cfg.terminal {
            TerminalMode::Static => None,
            TerminalMode::NoisedTarget => match &shared_eps {
                Some(e) => Some(e.clone()),
                None => Some(normal_rows(target_rngs, d)),
            },
        };
        let h = target_embeddings(targets, t, cfg.terminal, subject, score, eps.as_ref())?;
        let s_x = score.score(&x, t)?;
        let out = correction_step(&x, t, &h, subject, score, cfg, &s_x, prev_u.as_ref())?;
        let gamma = cfg.gamma_at(t, steps);
        let (x_hat, s_hat) = if gamma == 0.0 {
            (x, s_x.clone())
        } else {
            let mut xh = x;
            xh.axpy(gamma, &out.u)?;
            let sh = score.score(&xh, t)?;
            (xh, sh)
        };
        let dev = row_sq_dists(&s_hat, &s_x);
        let lr = cfg.lr_at(t, steps);
        for (i, log) in logs.iter_mut().enumerate() {
            let dg = &out.diagnostics[i];
            log.records.push(TrajectoryRecord {
                t,
                terminal_loss: dg.terminal_loss,
                u_norm: dg.u_norm,
                score_dev: dev[i],
                gamma,
                inner_lr: lr,
                x_hat_hash: row_hash(x_hat.row(i)),
                descent_ok: dg.descent_ok,
                non_finite: dg.non_finite,
            });
        }
        if cfg.warm_start {
            prev_u = Some(out.u);
        }
        x = denoise_step_with_score(&x_hat, &s_hat, t, sch, cfg.sampler, sampler_rngs)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_noise, sample_prior, NoiseSchedule, SamplerMode};
    use crate::guidance::{make_default_config, GammaSchedule};
    use crate::score_models::{AnalyticGmmScore, GmmPrior};
    use crate::subject::LinearSubject;

    fn oracle() -> (AnalyticGmmScore, LinearSubject) {
        let sch = NoiseSchedule::variance_preserving(100, 0.1, 20.0).unwrap();
        let score = AnalyticGmmScore::new(GmmPrior::standard_normal(2), sch);
        let phi = LinearSubject::new(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), "x1").unwrap();
        (score, phi)
    }

    fn target(h: f64) -> FiberTarget {
        FiberTarget {
            h: Tensor::vector(vec![h]),
            origin: Some(Tensor::vector(vec![h, 0.0])),
            subject_id: "x1".into(),
        }
    }

    #[test]
    fn zero_gamma_matches_unguided_bitwise() {
        let (score, phi) = oracle();
        let cfg = make_default_config().unguided();
        let targets = vec![target(0.7); 4];
        let (mut s, mut tr) = chain_rngs(3, 0, 4);
        let g = guided_sample(&targets, &phi, &score, &cfg, &mut s, &mut tr).unwrap();
        let (mut s2, _) = chain_rngs(3, 0, 4);
        let u = sample_prior(&score, &mut s2, SamplerMode::Ode).unwrap();
        assert_eq!(g.samples, u);
        assert!(g.logs.iter().all(|l| l.records.len() == 100));
        assert!(g.logs[0].records.iter().all(|r| r.u_norm == 0.0));
    }

    #[test]
    fn satisfied_target_keeps_u_at_zero() {
        let (score, phi) = oracle();
        let cfg = make_default_config();
        let x = Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let t = 50;
        let s = score.score(&x, t).unwrap();
        let h = phi.embed(&tweedie_plain(&x, &s, t, &score).unwrap()).unwrap();
        let out = correction_step(&x, t, &h, &phi, &score, &cfg, &s, None).unwrap();
        assert!(out.diagnostics[0].loss < 1e-24);
        assert!(out.u.norm_sq() < 1e-24);
    }

    #[test]
    fn correction_descends_on_gaussian_oracle() {
        let (score, phi) = oracle();
        let mut cfg = make_default_config();
        cfg.inner_steps = 8;
        let mut rng = stream_rng(5, 0);
        for k in 0..100 {
            let t = 1 + (k * 37) % 100;
            let x = crate::numerics::normal_tensor(&[1, 2], &mut rng);
            let s = score.score(&x, t).unwrap();
            let h = Tensor::from_rows(&[vec![0.7]]).unwrap();
            let out = correction_step(&x, t, &h, &phi, &score, &cfg, &s, None).unwrap();
            let d = &out.diagnostics[0];
            if cfg.gamma_at(t, 100) > 0.0 && d.loss_at_zero > 0.0 {
                assert!(d.terminal_loss < d.loss_at_zero, "t={t}: {d:?}");
            }
            assert!(d.descent_ok);
        }
    }

    #[test]
    fn noised_target_with_shared_draw_is_zero() {
        let (score, phi) = oracle();
        let tg = target(0.4);
        let mut r = vec![stream_rng(1, 0)];
        let origin = tg.origin.clone().unwrap().reshape(&[1, 2]).unwrap();
        let xt = forward_noise(&origin, 30, score.schedule(), &mut r).unwrap();
        let loss = terminal_loss(
            &xt,
            30,
            &[tg],
            &phi,
            &score,
            TerminalMode::NoisedTarget,
            &mut [stream_rng(1, 0)],
        )
        .unwrap();
        assert_eq!(loss, vec![0.0]);
    }

    #[test]
    fn static_loss_near_clean_step_is_fiber_loss() {
        let sch = NoiseSchedule::variance_exploding(10, 1e-6, 5.0).unwrap();
        let score = AnalyticGmmScore::new(GmmPrior::standard_normal(2), sch);
        let phi = LinearSubject::new(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), "x1").unwrap();
        let x = Tensor::from_rows(&[vec![0.2, 0.9]]).unwrap();
        let l = terminal_loss(&x, 1, &[target(0.7)], &phi, &score, TerminalMode::Static, &mut []).unwrap();
        assert!((l[0] - 0.25).abs() < 1e-9, "{}", l[0]);
    }

    #[test]
    fn static_gradient_vanishes_on_tweedie_fiber() {
        // N(0, I) under VP: tweedie(x_t) = sqrt(alpha_bar_t) x_t.
        let (score, phi) = oracle();
        let t = 40;
        let a = score.schedule().signal(t);
        let x = Tensor::from_rows(&[vec![0.7 / a, 1.3]]).unwrap();
        let h = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let g = crate::numerics::reverse_grad(
            |tape, v| {
                let x0 = tweedie_tape(tape, v, t, &score).unwrap();
                let e = phi.embed_tape(tape, x0)?;
                let hc = tape.constant(h.clone());
                let d = tape.row_sq_dist(e, hc)?;
                tape.sum(d)
            },
            &x,
        )
        .unwrap();
        assert!(g.norm_sq().sqrt() < 1e-8);
    }

    #[test]
    fn split_does_not_change_chains() {
        let (score, phi) = oracle();
        let cfg = make_default_config();
        let targets: Vec<FiberTarget> = (0..5).map(|i| target(0.1 * i as f64)).collect();
        let one = guided_sample_seeded(&targets, &phi, &score, &cfg, 4, 10, 1).unwrap();
        let three = guided_sample_seeded(&targets, &phi, &score, &cfg, 4, 10, 3).unwrap();
        assert_eq!(one.samples, three.samples);
        assert_eq!(one.logs, three.logs);
        let tail = guided_sample_seeded(&targets[2..], &phi, &score, &cfg, 4, 12, 1).unwrap();
        assert_eq!(tail.samples.row(0), one.samples.row(2));
    }

    #[test]
    fn missing_origin_is_an_error() {
        let (score, phi) = oracle();
        let mut cfg = make_default_config();
        cfg.terminal = TerminalMode::NoisedTarget;
        let tg = FiberTarget::from_embedding(Tensor::vector(vec![0.1]), "x1");
        let (mut s, mut r) = chain_rngs(0, 0, 1);
        let err = guided_sample(&[tg], &phi, &score, &cfg, &mut s, &mut r).unwrap_err();
        assert!(matches!(err.error, GuidanceError::MissingOrigin));
    }

    #[test]
    fn constant_gamma_guides_toward_fiber() {
        let (score, phi) = oracle();
        let mut cfg = make_default_config();
        cfg.gamma = GammaSchedule::Constant { gamma: 10.0 };
        let targets = vec![target(0.7); 64];
        let (mut s, mut r) = chain_rngs(9, 0, 64);
        let g = guided_sample(&targets, &phi, &score, &cfg, &mut s, &mut r).unwrap();
        let mut err: Vec<f64> = (0..64).map(|i| (g.samples.row(i)[0] - 0.7).abs()).collect();
        err.sort_by(f64::total_cmp);
        assert!(err[32] < 0.1, "median error {}", err[32]);
        assert!(g.logs.iter().all(|l| l.descent_violations() == 0));
    }
}
