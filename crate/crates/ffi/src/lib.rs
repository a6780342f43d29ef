//! C interface to fiberlab: subject models, fiber losses and guided fiber
//! sampling from a trained prior checkpoint.
//!
//! Every function returns an [`FlStatus`]; on failure the message is
//! available from [`fl_last_error_message`] on the same thread. Handles are
//! opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use fiberlab::diffusion::{ScheduleSpec, ScoreModel};
use fiberlab::guidance::{guided_sample_seeded, make_default_config, make_late_config};
use fiberlab::numerics::Tensor;
use fiberlab::score_models::{LearnedDenoiser, Parameterization};
use fiberlab::subject::{colorize, subject_from_id, ColorTriple, FiberTarget, Grid, SubjectModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlGuidancePreset {
    /// Boost window `[0.4 T, 0.7 T]`.
    Default = 0,
    /// Guidance on the last 30% of the schedule only.
    Late = 1,
}

/// Feature extractor `phi`.
pub struct FlSubject(Arc<dyn SubjectModel>);

/// Unconditional prior on the default 100-step VP schedule.
pub struct FlPrior(LearnedDenoiser);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

struct Failure(FlStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(FlStatus::InvalidArgument, msg.into())
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside fiberlab");
            FlStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FlStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    nonnull(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    nonnull(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    nonnull(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn numerical(e: impl std::fmt::Display) -> Failure {
    Failure(FlStatus::Numerical, e.to_string())
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Resolves a subject id (`colorglyph/flatten`, `colorglyph/proj:<d_h>`,
/// `colorglyph/ae:<file>`, `linear:<file>`) for `h x w` images.
///
/// # Safety
/// `id` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_subject_new(id: *const c_char, h: usize, w: usize, out: *mut *mut FlSubject) -> FlStatus {
    guard(|| {
        let id = str_arg(id, "id")?;
        nonnull(out, "out")?;
        let s = subject_from_id(id, h, w).map_err(|e| match e {
            fiberlab::subject::SubjectError::Io(_) => Failure(FlStatus::Io, e.to_string()),
            _ => Failure::invalid(e.to_string()),
        })?;
        *out = Box::into_raw(Box::new(FlSubject(s)));
        Ok(())
    })
}

/// # Safety
/// `subject` must come from [`fl_subject_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fl_subject_free(subject: *mut FlSubject) {
    if !subject.is_null() {
        drop(Box::from_raw(subject));
    }
}

/// # Safety
/// `subject` must be a live handle; `input_dim` and `output_dim` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fl_subject_dims(
    subject: *const FlSubject,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> FlStatus {
    guard(|| {
        nonnull(subject, "subject")?;
        nonnull(input_dim, "input_dim")?;
        nonnull(output_dim, "output_dim")?;
        let s = &(*subject).0;
        *input_dim = s.input_dim();
        *output_dim = s.output_dim();
        Ok(())
    })
}

/// Embeds `rows` row-major inputs of `input_dim` values into `out`
/// (`rows * output_dim` values).
///
/// # Safety
/// `x` and `out` must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn fl_subject_embed(
    subject: *const FlSubject,
    x: *const f64,
    rows: usize,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        nonnull(subject, "subject")?;
        let s = &(*subject).0;
        let x = Tensor::matrix(rows, s.input_dim(), slice_arg(x, rows * s.input_dim(), "x")?.to_vec()).map_err(numerical)?;
        let out = out_slice(out, rows * s.output_dim(), "out")?;
        let e = s.embed(&x).map_err(numerical)?;
        out.copy_from_slice(e.data());
        Ok(())
    })
}

/// `‖phi(a) − phi(b)‖²` for two inputs of `input_dim` values.
///
/// # Safety
/// `a` and `b` must hold `input_dim` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_fiber_loss(
    subject: *const FlSubject,
    a: *const f64,
    b: *const f64,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        nonnull(subject, "subject")?;
        nonnull(out, "out")?;
        let s = &(*subject).0;
        let d = s.input_dim();
        let a = Tensor::vector(slice_arg(a, d, "a")?.to_vec());
        let b = Tensor::vector(slice_arg(b, d, "b")?.to_vec());
        *out = fiberlab::subject::fiber_loss(s.as_ref(), &a, &b).map_err(numerical)?;
        Ok(())
    })
}

/// Colorizes an `h x w` gray grid with background `color[3]` into planar
/// RGB `out` (`3 h w` values). Colors must lie in `[0, 1)`.
///
/// # Safety
/// `gray` must hold `h w` values, `color` 3 and `out` `3 h w`.
#[no_mangle]
pub unsafe extern "C" fn fl_colorize(
    gray: *const f64,
    h: usize,
    w: usize,
    color: *const f64,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        let g = Grid::new(h, w, slice_arg(gray, h * w, "gray")?.to_vec()).map_err(|e| Failure::invalid(e.to_string()))?;
        let c = slice_arg(color, 3, "color")?;
        let c = ColorTriple::new([c[0], c[1], c[2]]).map_err(|e| Failure::invalid(e.to_string()))?;
        let img = colorize(&g, c).map_err(|e| Failure::invalid(e.to_string()))?;
        out_slice(out, 3 * h * w, "out")?.copy_from_slice(&img.data);
        Ok(())
    })
}

/// Loads an epsilon-parameterized prior checkpoint (FLB1 plus optional
/// `.skip.json` sidecar) on the default 100-step VP schedule.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_prior_load(path: *const c_char, out: *mut *mut FlPrior) -> FlStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        nonnull(out, "out")?;
        let sch = ScheduleSpec::default().build().map_err(numerical)?;
        let m = LearnedDenoiser::load(Path::new(path), sch, Parameterization::Epsilon)
            .map_err(|e| Failure(FlStatus::Io, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(FlPrior(m)));
        Ok(())
    })
}

/// # Safety
/// `prior` must come from [`fl_prior_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fl_prior_free(prior: *mut FlPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// # Safety
/// `prior` must be a live handle and `dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_prior_dim(prior: *const FlPrior, dim: *mut usize) -> FlStatus {
    guard(|| {
        nonnull(prior, "prior")?;
        nonnull(dim, "dim")?;
        *dim = (*prior).0.dim();
        Ok(())
    })
}

/// One guided sample per target embedding: `targets` holds `n` row-major
/// embeddings of `output_dim` values, `out` receives `n` samples of the
/// prior's dimension. `gamma_scale` multiplies the preset's schedule; 0
/// gives unguided samples. Results depend only on `seed`.
///
/// # Safety
/// Handles must be live and the buffers hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn fl_guided_sample(
    prior: *const FlPrior,
    subject: *const FlSubject,
    targets: *const f64,
    n: usize,
    preset: FlGuidancePreset,
    gamma_scale: f64,
    seed: u64,
    out: *mut f64,
) -> FlStatus {
    guard(|| {
        nonnull(prior, "prior")?;
        nonnull(subject, "subject")?;
        let (p, s) = (&(*prior).0, &(*subject).0);
        if p.dim() != s.input_dim() {
            return Err(Failure::invalid(format!(
                "prior has {} features, subject takes {}",
                p.dim(),
                s.input_dim()
            )));
        }
        let k = s.output_dim();
        let h = slice_arg(targets, n * k, "targets")?;
        let out = out_slice(out, n * p.dim(), "out")?;
        let mut cfg = match preset {
            FlGuidancePreset::Default => make_default_config(),
            FlGuidancePreset::Late => make_late_config(),
        };
        cfg.gamma_scale = gamma_scale;
        cfg.validate().map_err(|e| Failure::invalid(e.to_string()))?;
        let ts: Vec<FiberTarget> = h
            .chunks(k)
            .map(|row| FiberTarget::from_embedding(Tensor::vector(row.to_vec()), s.id()))
            .collect();
        let b = guided_sample_seeded(&ts, s.as_ref(), p, &cfg, seed, 0, 1).map_err(numerical)?;
        out.copy_from_slice(b.samples.data());
        Ok(())
    })
}
