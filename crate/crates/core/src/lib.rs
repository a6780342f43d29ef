//! Sampling from the fibers (invariant sets) of feature extractors by
//! steering a pretrained diffusion prior with per-step optimized
//! corrections, plus a colorized-glyph benchmark whose fibers are known in
//! closed form.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod numerics;
pub mod diffusion;
pub mod score_models;
pub mod subject;
pub mod guidance;
pub mod bench;
pub mod refine;
pub mod cli;
