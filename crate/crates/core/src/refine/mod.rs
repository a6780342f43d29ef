//! Post-hoc refinement of fiber samples by gradient descent on the fiber
//! loss, either in the latent space of an autoencoder or directly on pixels.

mod autoencoder;

pub use autoencoder::{train_autoencoder, AeArch, AutoEncoder, AE_STATS_FILE, DECODER_FILE, ENCODER_FILE};

use std::io::Write;

use crate::numerics::{Mlp, NumericsError, Tape, Tensor};
use crate::score_models::TrainTrace;
use crate::subject::{decolorize_rows, FiberTarget, SubjectError, SubjectModel};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("invalid refinement setup: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("autoencoder training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        trace: TrainTrace,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Subject(#[from] SubjectError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    /// Refined samples, one per input row.
    pub samples: Tensor,
    /// First iterate: `D(E(x̃))` for latent refinement, `x̃` for pixels.
    pub start: Tensor,
    /// `losses[i][r]`: fiber loss of row `r` at iterate `i`, `i = 0..=N`.
    pub losses: Vec<Vec<f64>>,
    /// Descent stopped on a non-finite value; the output holds the best
    /// iterate reached before it.
    pub non_finite: bool,
}

impl RefineOutput {
    pub fn start_losses(&self) -> &[f64] {
        &self.losses[0]
    }

    pub fn final_losses(&self) -> &[f64] {
        self.losses.last().expect("at least the start iterate")
    }

    /// Rows whose output loss exceeds the start loss.
    pub fn ascent_rows(&self) -> Vec<usize> {
        let (a, b) = (self.start_losses(), self.final_losses());
        (0..a.len()).filter(|&r| b[r] > a[r]).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,sample,fiber_loss")?;
        for (i, row) in self.losses.iter().enumerate() {
            for (r, l) in row.iter().enumerate() {
                writeln!(w, "{i},{r},{l:.9e}")?;
            }
        }
        Ok(())
    }
}

fn stack_targets(targets: &[FiberTarget], subject: &dyn SubjectModel) -> Result<Tensor, RefineError> {
    let rows: Vec<&[f64]> = targets.iter().map(|t| t.h.data()).collect();
    let h = Tensor::stack_rows(&rows)?;
    if h.cols() != subject.output_dim() {
        return Err(RefineError::Config(format!(
            "targets have {} features, subject produces {}",
            h.cols(),
            subject.output_dim()
        )));
    }
    Ok(h)
}

fn check_inputs(x: &Tensor, targets: &[FiberTarget], subject: &dyn SubjectModel, eta: f64, steps: usize) -> Result<(), RefineError> {
    if steps == 0 {
        return Err(RefineError::Config("steps must be >= 1".into()));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(RefineError::Config(format!("learning rate must be finite and >= 0, got {eta}")));
    }
    if x.rows() != targets.len() {
        return Err(RefineError::Config(format!("{} samples for {} targets", x.rows(), targets.len())));
    }
    if x.cols() != subject.input_dim() {
        return Err(RefineError::Config(format!(
            "samples have {} features, subject takes {}",
            x.cols(),
            subject.input_dim()
        )));
    }
    Ok(())
}

fn decode(decoder: Option<&Mlp>, z: &Tensor) -> Result<Tensor, NumericsError> {
    match decoder {
        Some(d) => d.forward(z),
        None => Ok(z.clone()),
    }
}

fn losses_of(subject: &dyn SubjectModel, x: &Tensor, h: &Tensor) -> Result<Vec<f64>, NumericsError> {
    let e = subject.embed(x)?;
    Ok((0..e.rows())
        .map(|r| e.row(r).iter().zip(h.row(r)).map(|(a, b)| (b - a).powi(2)).sum())
        .collect())
}

/// Loss of every row at `z` and its gradient with respect to `z`.
fn loss_and_grad(
    subject: &dyn SubjectModel,
    decoder: Option<&Mlp>,
    z: &Tensor,
    h: &Tensor,
) -> Result<(Vec<f64>, Tensor), NumericsError> {
    let mut tape = Tape::new();
    let zv = tape.var(z.clone());
    let xv = match decoder {
        Some(d) => d.forward_tape(&mut tape, zv)?,
        None => zv,
    };
    let hv = subject.embed_tape(&mut tape, xv)?;
    let target = tape.constant(h.clone());
    let per_row = tape.row_sq_dist(target, hv)?;
    let total = tape.sum(per_row)?;
    let losses = tape.value(per_row).data().to_vec();
    let mut g = tape.backward(total)?;
    let grad = g.take(zv);
    if !grad.is_finite() {
        return Err(NumericsError::NonFinite { op: "refine gradient" });
    }
    Ok((losses, grad))
}

fn descend(
    subject: &dyn SubjectModel,
    decoder: Option<&Mlp>,
    z0: Tensor,
    h: &Tensor,
    eta: f64,
    steps: usize,
) -> Result<RefineOutput, RefineError> {
    let start = decode(decoder, &z0)?;
    let mut z = z0;
    let mut best = (z.clone(), vec![f64::INFINITY; z.rows()]);
    let mut losses = Vec::with_capacity(steps + 1);
    let mut non_finite = false;
    for _ in 0..steps {
        let (l, g) = match loss_and_grad(subject, decoder, &z, h) {
            Ok(v) => v,
            Err(NumericsError::NonFinite { .. }) => {
                non_finite = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        for (r, &lr) in l.iter().enumerate() {
            if lr < best.1[r] {
                best.1[r] = lr;
                best.0.row_mut(r).copy_from_slice(z.row(r));
            }
        }
        losses.push(l);
        z.axpy(-eta, &g)?;
    }
    if non_finite || !z.is_finite() {
        non_finite = true;
        z = best.0;
    }
    let samples = decode(decoder, &z)?;
    if !samples.is_finite() {
        return Err(NumericsError::NonFinite { op: "refine output" }.into());
    }
    losses.push(losses_of(subject, &samples, h)?);
    if losses.len() == 1 {
        losses.insert(0, losses_of(subject, &start, h)?);
    }
    Ok(RefineOutput {
        samples,
        start,
        losses,
        non_finite,
    })
}

/// Gradient descent on `‖h − phi(D(z))‖²` from `z₀ = E(x̃)`; returns
/// `D(z_N)` for every row of `x`.
pub fn refine_latent(
    ae: &AutoEncoder,
    x: &Tensor,
    targets: &[FiberTarget],
    subject: &dyn SubjectModel,
    eta: f64,
    steps: usize,
) -> Result<RefineOutput, RefineError> {
    let x = x.as_matrix();
    check_inputs(&x, targets, subject, eta, steps)?;
    if ae.input_dim() != x.cols() {
        return Err(RefineError::Config(format!(
            "autoencoder takes {} features, samples have {}",
            ae.input_dim(),
            x.cols()
        )));
    }
    let h = stack_targets(targets, subject)?;
    let z0 = ae.encode(&x)?;
    descend(subject, Some(&ae.decoder), z0, &h, eta, steps)
}

/// Gradient descent on `‖h − phi(x)‖²` directly from `x̃`.
pub fn refine_pixel(
    x: &Tensor,
    targets: &[FiberTarget],
    subject: &dyn SubjectModel,
    eta: f64,
    steps: usize,
) -> Result<RefineOutput, RefineError> {
    let x = x.as_matrix();
    check_inputs(&x, targets, subject, eta, steps)?;
    let h = stack_targets(targets, subject)?;
    descend(subject, None, x, &h, eta, steps)
}

/// Anisotropic total variation of `decolorize(a) − decolorize(b)` on an
/// `h x w` grid, one value per row.
pub fn decolorized_difference_tv(a: &Tensor, b: &Tensor, h: usize, w: usize) -> Result<Vec<f64>, RefineError> {
    let d = decolorize_rows(&a.as_matrix(), h, w)?.sub(&decolorize_rows(&b.as_matrix(), h, w)?)?;
    Ok((0..d.rows())
        .map(|i| {
            let g = d.row(i);
            let mut tv = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let v = g[r * w + c];
                    if c + 1 < w {
                        tv += (g[r * w + c + 1] - v).abs();
                    }
                    if r + 1 < h {
                        tv += (g[(r + 1) * w + c] - v).abs();
                    }
                }
            }
            tv
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{stream_rng, Activation, Layer};
    use crate::subject::LinearSubject;
    use nalgebra::{DMatrix, RowDVector};
    use std::sync::Arc;

    fn linear(w: &[&[f64]], b: &[f64]) -> Mlp {
        let rows: Vec<Vec<f64>> = w.iter().map(|r| r.to_vec()).collect();
        Mlp::new(vec![Layer {
            weight: Arc::new(Tensor::from_rows(&rows).unwrap()),
            bias: Arc::new(Tensor::vector(b.to_vec())),
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    fn fixture() -> (AutoEncoder, LinearSubject, Tensor, FiberTarget) {
        let enc = linear(&[&[1.0, 0.5], &[0.0, 1.0], &[2.0, -1.0]], &[0.1, 0.0]);
        let dec = linear(&[&[1.0, 0.0, 0.5], &[0.5, 1.0, 0.0]], &[0.0, 0.2, -0.1]);
        let ae = AutoEncoder::new(enc, dec, 0.0).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let s = LinearSubject::new(&a, "lin").unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.5]]).unwrap();
        let t = FiberTarget::from_embedding(Tensor::vector(vec![0.4, -0.3]), "lin");
        (ae, s, x, t)
    }

    #[test]
    fn two_linear_steps_match_closed_form() {
        let (ae, s, x, t) = fixture();
        let eta = 0.05;
        let we = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.0, 1.0, 2.0, -1.0]);
        let be = RowDVector::from_row_slice(&[0.1, 0.0]);
        let wd = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.5, 1.0, 0.0]);
        let bd = RowDVector::from_row_slice(&[0.0, 0.2, -0.1]);
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, 1.0]);
        let h = RowDVector::from_row_slice(&[0.4, -0.3]);
        let xt = RowDVector::from_row_slice(&[0.3, -0.2, 0.5]);
        let mut z = &xt * &we + &be;
        let mut want_losses = Vec::new();
        for _ in 0..2 {
            let xi = &z * &wd + &bd;
            let r = &xi * a.transpose() - &h;
            want_losses.push(r.norm_squared());
            let grad = (&r * &a * wd.transpose()) * 2.0;
            z -= grad * eta;
        }
        let out_want = &z * &wd + &bd;
        want_losses.push((&out_want * a.transpose() - &h).norm_squared());
        let out = refine_latent(&ae, &x, &[t], &s, eta, 2).unwrap();
        for j in 0..3 {
            assert!((out.samples.data()[j] - out_want[j]).abs() < 1e-14);
        }
        for (got, want) in out.losses.iter().zip(&want_losses) {
            assert!((got[0] - want).abs() < 1e-14, "{got:?} vs {want}");
        }
        assert!(!out.non_finite);
    }

    #[test]
    fn zero_rate_returns_reconstruction() {
        let (ae, s, x, t) = fixture();
        let out = refine_latent(&ae, &x, std::slice::from_ref(&t), &s, 0.0, 5).unwrap();
        assert_eq!(out.samples, ae.decode(&ae.encode(&x).unwrap()).unwrap());
        assert_eq!(out.samples, out.start);
        let out = refine_pixel(&x, &[t], &s, 0.0, 5).unwrap();
        assert_eq!(out.samples, x);
    }

    #[test]
    fn pixel_descent_reduces_loss() {
        let (_, s, _, t) = fixture();
        let x = Tensor::from_rows(&[vec![2.0, 1.0, -1.0]]).unwrap();
        let out = refine_pixel(&x, &[t], &s, 0.05, 100).unwrap();
        assert!(out.final_losses()[0] < 1e-3 * out.start_losses()[0]);
        assert!(out.ascent_rows().is_empty());
        assert_eq!(out.losses.len(), 101);
    }

    #[test]
    fn stationary_on_fiber() {
        let (_, s, x, _) = fixture();
        let t = FiberTarget::from_origin(&s, &x.row_tensor(0)).unwrap();
        let id = AutoEncoder::new(Mlp::identity(3), Mlp::identity(3), 0.0).unwrap();
        let out = refine_latent(&id, &x, &[t], &s, 0.1, 20).unwrap();
        assert!(out.final_losses()[0] < 1e-28);
        assert_eq!(out.samples, x);
    }

    #[test]
    fn divergent_rate_keeps_best_iterate() {
        let (_, s, _, t) = fixture();
        let x = Tensor::from_rows(&[vec![2.0, 1.0, -1.0]]).unwrap();
        let out = refine_pixel(&x, &[t], &s, 1e3, 400).unwrap();
        assert!(out.non_finite);
        assert!(out.final_losses()[0] <= out.start_losses()[0]);
    }

    #[test]
    fn tv_of_constant_difference_is_zero() {
        use crate::subject::{colorize, ColorTriple, Grid};
        let mut rng = stream_rng(1, 0);
        let mut g = Grid::zeros(6, 6);
        for r in 1..5 {
            for c in 1..5 {
                g.data[r * 6 + c] = rand::Rng::random::<f64>(&mut rng);
            }
        }
        let a = Tensor::matrix(1, 108, colorize(&g, ColorTriple([0.2, 0.7, 0.4])).unwrap().data).unwrap();
        let b = Tensor::matrix(1, 108, colorize(&g, ColorTriple([0.6, 0.1, 0.9])).unwrap().data).unwrap();
        assert!(decolorized_difference_tv(&a, &b, 6, 6).unwrap()[0] < 1e-12);
        let mut g2 = g.clone();
        g2.data[2 * 6 + 2] += 0.5;
        let c = Tensor::matrix(1, 108, colorize(&g2, ColorTriple([0.2, 0.7, 0.4])).unwrap().data).unwrap();
        assert!((decolorized_difference_tv(&c, &a, 6, 6).unwrap()[0] - 2.0).abs() < 1e-9);
    }
}
