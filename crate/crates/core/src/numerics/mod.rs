//! Dense tensors, reverse-mode differentiation, small MLPs and Adam.

mod adam;
pub mod checkpoint;
mod mlp;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use mlp::{Activation, BoundParams, Layer, Mlp};
pub use rng::{normal_rows, normal_tensor, stream_rng, StreamRng};
pub use tape::{reverse_grad, value_and_grad, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}
