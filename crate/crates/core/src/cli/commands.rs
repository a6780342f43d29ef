use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use super::config::{require_file, AeInput, Method};
use super::{CliError, Command, Datasets, RunContext};
use crate::bench::{
    colorize_grays, encode_idx_images, encode_idx_labels, eval_consistency, eval_fidelity, median, median_by_value, run_sweep,
    sample_sets, tile_ppm_with_comment, BenchError, BenchmarkReport, CellResult, ColorPrior, ConditionalFiberModel,
    FiberModel, GuidedFiberModel, OracleResampler, ReportRow, SweepAxis,
};
use crate::diffusion::NoiseSchedule;
use crate::guidance::guided_sample_seeded;
use crate::numerics::{stream_rng, Tensor};
use crate::refine::{decolorized_difference_tv, refine_latent, refine_pixel, train_autoencoder, AutoEncoder, RefineError};
use crate::score_models::{
    train_conditional, train_prior, ConditionalDenoiser, LearnedDenoiser, ScoreModelError, TrainTrace,
};
use crate::subject::{fiber_losses_to, nearest_neighbor_baseline, subject_from_id, FiberTarget, RgbImage, SubjectModel};

pub fn dispatch(cmd: &Command, ctx: &mut RunContext) -> Result<(), CliError> {
    match cmd {
        Command::TrainPrior => train_prior_cmd(ctx),
        Command::TrainConditional => train_conditional_cmd(ctx),
        Command::TrainAe => train_ae_cmd(ctx),
        Command::SampleFiber { targets, count } => sample_fiber_cmd(ctx, targets.clone(), *count),
        Command::Evaluate => evaluate_cmd(ctx),
        Command::Sweep => sweep_cmd(ctx),
        Command::Refine => refine_cmd(ctx),
        Command::GenData => gen_data_cmd(ctx),
    }
}

fn schedule(ctx: &RunContext) -> Result<NoiseSchedule, CliError> {
    ctx.cfg.schedule.build().map_err(|e| CliError::Config(format!("schedule: {e}")))
}

fn subject(ctx: &RunContext, data: &Datasets) -> Result<Arc<dyn SubjectModel>, CliError> {
    let (h, w) = data.shape();
    subject_from_id(&ctx.cfg.subject.id, h, w).map_err(|e| CliError::Config(format!("subject.id: {e}")))
}

fn load_prior(ctx: &RunContext, dim: usize) -> Result<LearnedDenoiser, CliError> {
    let p = require_file("prior.checkpoint", &ctx.cfg.prior.checkpoint)?;
    let m = LearnedDenoiser::load(&p, schedule(ctx)?, ctx.cfg.prior.parameterization)
        .map_err(|e| CliError::Config(format!("prior.checkpoint: {e}")))?;
    if crate::diffusion::ScoreModel::dim(&m) != dim {
        return Err(CliError::Config(format!(
            "prior.checkpoint: model has {} features, data has {dim}",
            crate::diffusion::ScoreModel::dim(&m)
        )));
    }
    Ok(m)
}

fn load_conditional(ctx: &RunContext, dim: usize) -> Result<ConditionalDenoiser, CliError> {
    let p = require_file("conditional.checkpoint", &ctx.cfg.conditional.checkpoint)?;
    ConditionalDenoiser::load(&p, dim).map_err(|e| CliError::Config(format!("conditional.checkpoint: {e}")))
}

fn load_ae(ctx: &RunContext) -> Result<AutoEncoder, CliError> {
    let p = require_file("ae.checkpoint", &ctx.cfg.ae.checkpoint)?;
    AutoEncoder::load(&p).map_err(|e| CliError::Config(format!("ae.checkpoint: {e}")))
}

fn write_trace(ctx: &mut RunContext, name: &str, trace: &TrainTrace) -> Result<(), CliError> {
    ctx.write_csv(name, |w| trace.write_csv(w))?;
    Ok(())
}

/// Writes the partial trace of an aborted run and maps the error.
fn score_model_abort(ctx: &mut RunContext, name: &str, e: ScoreModelError) -> CliError {
    match e {
        ScoreModelError::Diverged { ref trace, .. } | ScoreModelError::TooManySkipped { ref trace, .. } => {
            if let Err(w) = write_trace(ctx, name, trace) {
                return w;
            }
            CliError::TrainingAbort(e.to_string())
        }
        ScoreModelError::InvalidArch(m) => CliError::Config(format!("arch: {m}")),
        other => CliError::Runtime(other.to_string()),
    }
}

fn train_prior_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let data = Datasets::load(&ctx.cfg.data)?;
    let sch = schedule(ctx)?;
    let p = &ctx.cfg.prior;
    let mut rng = stream_rng(ctx.cfg.seed, 0);
    let result = train_prior(&data.train.to_tensor(), &sch, &p.arch, p.parameterization, &p.train, &mut rng);
    let (model, trace) = result.map_err(|e| score_model_abort(ctx, "prior_trace.csv", e))?;
    let path = ctx.path("prior.flb");
    model.save(&path).map_err(CliError::runtime)?;
    ctx.record(path.clone());
    if model.skip().is_some() {
        ctx.record(crate::score_models::skip_path(&path));
    }
    write_trace(ctx, "prior_trace.csv", &trace)
}

fn train_conditional_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let data = Datasets::load(&ctx.cfg.data)?;
    let subject = subject(ctx, &data)?;
    let x = data.train.to_tensor();
    let emb = subject.embed(&x).map_err(CliError::runtime)?;
    let c = &ctx.cfg.conditional;
    let result = train_conditional(&x, &emb, subject.as_ref(), &c.arch, &c.train, &c.fiber_reg, ctx.cfg.seed);
    let (model, trace) = result.map_err(|e| score_model_abort(ctx, "conditional_trace.csv", e))?;
    let path = ctx.path("conditional.flb");
    model.save(&path).map_err(CliError::runtime)?;
    ctx.record(path);
    write_trace(ctx, "conditional_trace.csv", &trace)
}

fn train_ae_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let data = Datasets::load(&ctx.cfg.data)?;
    let x = match ctx.cfg.ae.input {
        AeInput::Gray => data.train.gray_tensor(),
        AeInput::Color => data.train.to_tensor(),
    };
    let mut rng = stream_rng(ctx.cfg.seed, 0);
    let (ae, trace) = match train_autoencoder(&x, &ctx.cfg.ae.arch, &ctx.cfg.ae.train, &mut rng) {
        Ok(r) => r,
        Err(RefineError::Diverged { trace, step, reason }) => {
            write_trace(ctx, "ae_trace.csv", &trace)?;
            return Err(CliError::TrainingAbort(format!("step {step}: {reason}")));
        }
        Err(RefineError::Config(m)) => return Err(CliError::Config(format!("ae.arch: {m}"))),
        Err(e) => return Err(CliError::runtime(e)),
    };
    let dir = ctx.path("ae");
    ae.save(&dir).map_err(CliError::runtime)?;
    for f in [crate::refine::ENCODER_FILE, crate::refine::DECODER_FILE, crate::refine::AE_STATS_FILE] {
        ctx.record(dir.join(f));
    }
    write_trace(ctx, "ae_trace.csv", &trace)
}

fn image(row: &[f64], h: usize, w: usize) -> Result<RgbImage, CliError> {
    RgbImage::new(h, w, row.to_vec()).map_err(CliError::runtime)
}

fn pooled(sets: &[Tensor]) -> Result<Tensor, BenchError> {
    let rows: Vec<&[f64]> = sets.iter().flat_map(|s| (0..s.rows()).map(move |i| s.row(i))).collect();
    Ok(Tensor::stack_rows(&rows)?)
}

/// Samples `sets` sets per target and scores them.
fn eval_cell(
    model: &dyn FiberModel,
    subject: &dyn SubjectModel,
    targets: &[FiberTarget],
    sets: usize,
    seed: u64,
    data: &Datasets,
    train: &Tensor,
) -> Result<CellResult, BenchError> {
    let samples = sample_sets(model, targets, sets, seed)?;
    let fidelity = eval_fidelity(subject, targets, &samples, train)?;
    let consistency = eval_consistency(&pooled(&samples)?, data.train.h, data.train.w, &ColorPrior::default())?;
    Ok(CellResult {
        method: model.name(),
        fidelity,
        consistency,
    })
}

/// Recolorizations per held-out grid in the oracle's candidate pool.
pub const ORACLE_POOL: usize = 64;

/// Held-out grids recolorized `ORACLE_POOL` times with fresh prior colors,
/// so every target has exact fiber members to draw from.
fn fiber_pool(data: &Datasets, seed: u64) -> Result<Tensor, CliError> {
    let grays = (0..ORACLE_POOL).flat_map(|_| data.held_out.grays.iter().cloned()).collect();
    let pool = colorize_grays(grays, data.held_out.variant, seed).map_err(CliError::runtime)?;
    Ok(pool.to_tensor())
}

fn sample_fiber_cmd(ctx: &mut RunContext, targets: Option<Vec<usize>>, count: Option<usize>) -> Result<(), CliError> {
    let idx = targets.unwrap_or_else(|| ctx.cfg.sample.targets.clone());
    let count = count.unwrap_or(ctx.cfg.sample.count);
    if idx.is_empty() {
        return Err(CliError::Config("sample.targets: at least one target index".into()));
    }
    if count == 0 {
        return Err(CliError::Config("sample.count: must be >= 1".into()));
    }
    let data = Datasets::load(&ctx.cfg.data)?;
    let subject = subject(ctx, &data)?;
    let prior = load_prior(ctx, data.train.dim())?;
    let targets = data.targets(subject.as_ref(), &idx)?;
    let train = data.train.to_tensor();
    let (h, w) = data.shape();

    let mut sets: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(count); targets.len()];
    for j in 0..count {
        let seed = ctx.cfg.seed.wrapping_add(j as u64);
        let run = guided_sample_seeded(&targets, subject.as_ref(), &prior, &ctx.cfg.guidance, seed, 0, ctx.cfg.threads);
        let (logs, batch) = match run {
            Ok(b) => (b.logs.clone(), Ok(b)),
            Err(f) => (f.logs, Err(f.error)),
        };
        for (k, log) in logs.iter().enumerate() {
            ctx.write_csv(&format!("logs/target{}_set{j}.csv", idx[k]), |out| log.write_csv(out))?;
        }
        let batch = batch.map_err(CliError::runtime)?;
        for (k, set) in sets.iter_mut().enumerate() {
            set.push(batch.samples.row(k).to_vec());
        }
    }
    let sets: Vec<Tensor> = sets
        .into_iter()
        .map(|rows| Tensor::from_rows(&rows))
        .collect::<Result<_, _>>()
        .map_err(CliError::runtime)?;

    let mut grid: Vec<Vec<RgbImage>> = Vec::with_capacity(targets.len());
    let mut loss_csv = Vec::new();
    writeln!(loss_csv, "target,rank,set,fiber_loss,nn_index,nn_loss").map_err(CliError::runtime)?;
    for ((t, set), &ti) in targets.iter().zip(&sets).zip(&idx) {
        let losses = fiber_losses_to(subject.as_ref(), &t.h, set).map_err(CliError::runtime)?;
        let nn = nearest_neighbor_baseline(subject.as_ref(), t, &train).map_err(CliError::runtime)?;
        let mut order: Vec<usize> = (0..losses.len()).collect();
        order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
        let mut row = vec![image(data.held_out.images[ti].data.as_slice(), h, w)?, image(nn.sample.data(), h, w)?];
        for (rank, &j) in order.iter().enumerate() {
            row.push(image(set.row(j), h, w)?);
            writeln!(loss_csv, "{ti},{rank},{j},{:.9e},{},{:.9e}", losses[j], nn.index, nn.loss).map_err(CliError::runtime)?;
        }
        grid.push(row);
    }
    ctx.write_csv("sample_losses.csv", |out| out.write_all(&loss_csv))?;
    let refs: Vec<Vec<&RgbImage>> = grid.iter().map(|r| r.iter().collect()).collect();
    let comment = format!("{}\ncolumns: original | nearest neighbor | samples by fiber loss", ctx.stamp());
    ctx.write("sample.ppm", &tile_ppm_with_comment(&refs, Some(&comment)))?;

    let fidelity = eval_fidelity(subject.as_ref(), &targets, &sets, &train).map_err(CliError::runtime)?;
    let consistency =
        eval_consistency(&pooled(&sets).map_err(CliError::runtime)?, h, w, &ColorPrior::default()).map_err(CliError::runtime)?;
    let cell = CellResult {
        method: Method::Ndtm.label().into(),
        fidelity,
        consistency,
    };
    let mut report = BenchmarkReport::new(ctx.hash.clone(), ctx.cfg.seed);
    report
        .rows
        .push(ReportRow::from_cell("gamma_scale", ctx.cfg.guidance.gamma_scale, ctx.cfg.seed, &cell));
    save_report(ctx, &report, "sample")
}

fn save_report(ctx: &mut RunContext, report: &BenchmarkReport, stem: &str) -> Result<(), CliError> {
    for p in report.save(ctx.out(), stem).map_err(CliError::runtime)? {
        ctx.record(p);
    }
    Ok(())
}

fn evaluate_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let methods = ctx.cfg.evaluate.methods.clone();
    if methods.is_empty() {
        return Err(CliError::Config("evaluate.methods: at least one method".into()));
    }
    if ctx.cfg.evaluate.sets == 0 {
        return Err(CliError::Config("evaluate.sets: must be >= 1".into()));
    }
    let data = Datasets::load(&ctx.cfg.data)?;
    let subject = subject(ctx, &data)?;
    let train = data.train.to_tensor();
    let all: Vec<usize> = (0..data.held_out.len()).collect();
    let targets = data.targets(subject.as_ref(), &all)?;
    let prior = match methods.contains(&Method::Ndtm) {
        true => Some(load_prior(ctx, train.cols())?),
        false => None,
    };
    let cond = match methods.contains(&Method::Conditional) {
        true => Some(load_conditional(ctx, train.cols())?),
        false => None,
    };
    let oracle_pool = match methods.contains(&Method::Oracle) {
        true => Some(fiber_pool(&data, ctx.cfg.seed)?),
        false => None,
    };
    let mut report = BenchmarkReport::new(ctx.hash.clone(), ctx.cfg.seed);
    for m in methods {
        let model: Box<dyn FiberModel> = match m {
            Method::Ndtm => Box::new(GuidedFiberModel {
                score: prior.as_ref().expect("loaded above"),
                subject: subject.as_ref(),
                cfg: ctx.cfg.guidance.clone(),
                threads: ctx.cfg.threads,
                label: m.label().into(),
            }),
            Method::Conditional => Box::new(ConditionalFiberModel {
                model: cond.as_ref().expect("loaded above"),
                steps: ctx.cfg.conditional.sample_steps,
                label: m.label().into(),
            }),
            Method::Oracle => Box::new(OracleResampler::new(subject.as_ref(), oracle_pool.as_ref().expect("built above")).map_err(CliError::runtime)?),
        };
        let seed = ctx.cfg.seed;
        let row = match eval_cell(model.as_ref(), subject.as_ref(), &targets, ctx.cfg.evaluate.sets, seed, &data, &train) {
            Ok(cell) => ReportRow::from_cell("none", 0.0, seed, &cell),
            Err(e) => ReportRow::failed(m.label(), "none", 0.0, seed, e.to_string()),
        };
        report.rows.push(row);
    }
    save_report(ctx, &report, "evaluate")?;
    if report.successes() == 0 {
        return Err(CliError::NoSuccess("every method failed; see evaluate.csv".into()));
    }
    Ok(())
}

fn sweep_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let sw = ctx.cfg.sweep.clone();
    if sw.values.is_empty() {
        return Err(CliError::Config("sweep.values: empty sweep axis".into()));
    }
    if sw.seeds.is_empty() {
        return Err(CliError::Config("sweep.seeds: at least one seed".into()));
    }
    if sw.sets == 0 {
        return Err(CliError::Config("sweep.sets: must be >= 1".into()));
    }
    if sw.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CliError::Config("sweep.values: must be finite and >= 0".into()));
    }
    let data = Datasets::load(&ctx.cfg.data)?;
    let subject = subject(ctx, &data)?;
    let train = data.train.to_tensor();
    let all: Vec<usize> = (0..data.held_out.len()).collect();
    let targets = data.targets(subject.as_ref(), &all)?;
    let mut report = BenchmarkReport::new(ctx.hash.clone(), ctx.cfg.seed);
    let method = match sw.axis {
        SweepAxis::Gamma => Method::Ndtm,
        SweepAxis::LambdaFiber => Method::Conditional,
    };
    match sw.axis {
        SweepAxis::Gamma => {
            let prior = load_prior(ctx, train.cols())?;
            let cfg = &ctx.cfg;
            run_sweep(sw.axis, &sw.values, &sw.seeds, method.label(), &mut report, |v, s| {
                let mut g = cfg.guidance.clone();
                g.gamma_scale *= v;
                let model = GuidedFiberModel {
                    score: &prior,
                    subject: subject.as_ref(),
                    cfg: g,
                    threads: cfg.threads,
                    label: method.label().into(),
                };
                eval_cell(&model, subject.as_ref(), &targets, sw.sets, s, &data, &train)
            })
            .map_err(|e| CliError::Config(format!("sweep: {e}")))?;
        }
        SweepAxis::LambdaFiber => {
            let emb = subject.embed(&train).map_err(CliError::runtime)?;
            let cfg = &ctx.cfg;
            run_sweep(sw.axis, &sw.values, &sw.seeds, method.label(), &mut report, |v, s| {
                let c = &cfg.conditional;
                let reg = crate::score_models::FiberRegSpec {
                    lambda_fiber: v,
                    ..c.fiber_reg.clone()
                };
                let (model, _) = train_conditional(&train, &emb, subject.as_ref(), &c.arch, &c.train, &reg, s)?;
                let fm = ConditionalFiberModel {
                    model: &model,
                    steps: c.sample_steps,
                    label: method.label().into(),
                };
                eval_cell(&fm, subject.as_ref(), &targets, sw.sets, s, &data, &train)
            })
            .map_err(|e| CliError::Config(format!("sweep: {e}")))?;
        }
    }
    save_report(ctx, &report, "sweep")?;
    let medians = median_by_value(&report, method.label(), &sw.values);
    ctx.write_csv("sweep.medians.tsv", |out| {
        writeln!(out, "{}\tmedian_fiber_loss", sw.axis.label())?;
        for (v, m) in sw.values.iter().zip(&medians) {
            writeln!(out, "{v}\t{m:.9e}")?;
        }
        Ok(())
    })?;
    if report.successes() == 0 {
        return Err(CliError::NoSuccess("every sweep cell failed; see sweep.csv".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct RefineSummary {
    samples: usize,
    steps: usize,
    eta: f64,
    pixel_eta: f64,
    median_ndtm: f64,
    median_latent_start: f64,
    median_latent: f64,
    median_pixel: f64,
    reduction: f64,
    median_ndtm_tv: f64,
    median_latent_tv: f64,
    median_pixel_tv: f64,
    latent_ascent_rows: Vec<usize>,
    latent_non_finite: bool,
    pixel_non_finite: bool,
}

fn refine_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let r = ctx.cfg.refine.clone();
    if r.count == 0 {
        return Err(CliError::Config("refine.count: must be >= 1".into()));
    }
    let data = Datasets::load(&ctx.cfg.data)?;
    if r.count > data.held_out.len() {
        return Err(CliError::Config(format!(
            "refine.count: {} exceeds data.targets = {}",
            r.count,
            data.held_out.len()
        )));
    }
    let subject = subject(ctx, &data)?;
    let prior = load_prior(ctx, data.train.dim())?;
    let ae = load_ae(ctx)?;
    let (h, w) = data.shape();
    let idx: Vec<usize> = (0..r.count).collect();
    let targets = data.targets(subject.as_ref(), &idx)?;
    let x = guided_sample_seeded(&targets, subject.as_ref(), &prior, &ctx.cfg.guidance, ctx.cfg.seed, 0, ctx.cfg.threads)
        .map_err(CliError::runtime)?
        .samples;
    let cfg_err = |field: &'static str| {
        move |e: RefineError| match e {
            RefineError::Config(m) => CliError::Config(format!("{field}: {m}")),
            other => CliError::runtime(other),
        }
    };
    let latent = refine_latent(&ae, &x, &targets, subject.as_ref(), r.eta, r.steps).map_err(cfg_err("refine.eta"))?;
    let pixel = refine_pixel(&x, &targets, subject.as_ref(), r.pixel_eta, r.steps).map_err(cfg_err("refine.pixel_eta"))?;
    let originals = data.held_out.subset(&idx).to_tensor();
    let tv = |s: &Tensor| decolorized_difference_tv(s, &originals, h, w).map_err(CliError::runtime);
    let (tv_n, tv_l, tv_p) = (tv(&x)?, tv(&latent.samples)?, tv(&pixel.samples)?);
    let ndtm = pixel.start_losses().to_vec();

    ctx.write_csv("refine_latent_trace.csv", |out| latent.write_csv(out))?;
    ctx.write_csv("refine_pixel_trace.csv", |out| pixel.write_csv(out))?;
    ctx.write_csv("refine.csv", |out| {
        writeln!(out, "sample,ndtm_loss,latent_start_loss,latent_loss,pixel_loss,ndtm_tv,latent_tv,pixel_tv")?;
        for i in 0..r.count {
            writeln!(
                out,
                "{i},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                ndtm[i],
                latent.start_losses()[i],
                latent.final_losses()[i],
                pixel.final_losses()[i],
                tv_n[i],
                tv_l[i],
                tv_p[i]
            )?;
        }
        Ok(())
    })?;
    let summary = RefineSummary {
        samples: r.count,
        steps: r.steps,
        eta: r.eta,
        pixel_eta: r.pixel_eta,
        median_ndtm: median(&ndtm),
        median_latent_start: median(latent.start_losses()),
        median_latent: median(latent.final_losses()),
        median_pixel: median(pixel.final_losses()),
        reduction: median(&ndtm) / median(latent.final_losses()),
        median_ndtm_tv: median(&tv_n),
        median_latent_tv: median(&tv_l),
        median_pixel_tv: median(&tv_p),
        latent_ascent_rows: latent.ascent_rows(),
        latent_non_finite: latent.non_finite,
        pixel_non_finite: pixel.non_finite,
    };
    #[derive(Serialize)]
    struct Stamped<'a> {
        config_hash: &'a str,
        seed: u64,
        #[serde(flatten)]
        summary: &'a RefineSummary,
    }
    let json = serde_json::to_string_pretty(&Stamped {
        config_hash: &ctx.hash,
        seed: ctx.cfg.seed,
        summary: &summary,
    })
    .map_err(CliError::runtime)?;
    ctx.write("refine.json", json.as_bytes())?;

    let mut grid = Vec::with_capacity(r.count);
    for i in 0..r.count {
        grid.push(vec![
            image(originals.row(i), h, w)?,
            image(x.row(i), h, w)?,
            image(latent.samples.row(i), h, w)?,
            image(pixel.samples.row(i), h, w)?,
        ]);
    }
    let refs: Vec<Vec<&RgbImage>> = grid.iter().map(|r| r.iter().collect()).collect();
    let comment = format!("{}\ncolumns: original | guided sample | latent refined | pixel refined", ctx.stamp());
    ctx.write("refine.ppm", &tile_ppm_with_comment(&refs, Some(&comment)))?;
    Ok(())
}

fn gen_data_cmd(ctx: &mut RunContext) -> Result<(), CliError> {
    let data = Datasets::load(&ctx.cfg.data)?;
    let d = &data.train;
    let images = encode_idx_images(&d.grays).map_err(CliError::runtime)?;
    ctx.write("glyphs-images.idx", &images)?;
    ctx.write("glyphs-labels.idx", &encode_idx_labels(&vec![0; d.len()]))?;
    ctx.write_csv("glyphs-colors.csv", |out| {
        writeln!(out, "index,bg_r,bg_g,bg_b,fg_r,fg_g,fg_b")?;
        for (i, (c, f)) in d.colors.iter().zip(&d.foregrounds).enumerate() {
            writeln!(
                out,
                "{i},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                c.0[0], c.0[1], c.0[2], f[0], f[1], f[2]
            )?;
        }
        Ok(())
    })?;
    let shown: Vec<&RgbImage> = d.images.iter().take(64).collect();
    let rows: Vec<Vec<&RgbImage>> = shown.chunks(8).map(|c| c.to_vec()).collect();
    ctx.write("glyphs-preview.ppm", &tile_ppm_with_comment(&rows, Some(&ctx.stamp())))?;
    Ok(())
}
