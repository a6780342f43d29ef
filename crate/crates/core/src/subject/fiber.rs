use nalgebra::DMatrix;

use super::{SubjectError, SubjectModel};
use crate::numerics::{Tape, Tensor};

/// Target representation `h`, optionally with the sample that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberTarget {
    pub h: Tensor,
    pub origin: Option<Tensor>,
    pub subject_id: String,
}

impl FiberTarget {
    pub fn from_origin(subject: &dyn SubjectModel, origin: &Tensor) -> Result<Self, SubjectError> {
        let x = origin.clone().reshape(&[1, origin.len()])?;
        let h = subject.embed(&x)?;
        Ok(Self {
            h: h.reshape(&[subject.output_dim()])?,
            origin: Some(x.reshape(&[origin.len()])?),
            subject_id: subject.id(),
        })
    }

    pub fn from_embedding(h: Tensor, subject_id: impl Into<String>) -> Self {
        let n = h.len();
        Self {
            h: h.reshape(&[n]).expect("flat"),
            origin: None,
            subject_id: subject_id.into(),
        }
    }

    /// Checks `‖phi(origin) − h‖ ≤ 1e-9` when an origin is present.
    pub fn validate(&self, subject: &dyn SubjectModel) -> Result<(), SubjectError> {
        if self.h.len() != subject.output_dim() {
            return Err(SubjectError::Shape(format!(
                "target has {} features, subject produces {}",
                self.h.len(),
                subject.output_dim()
            )));
        }
        if let Some(o) = &self.origin {
            let e = subject.embed(&o.clone().reshape(&[1, o.len()])?)?;
            let d = e.into_data().iter().zip(self.h.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            if d.sqrt() > 1e-9 {
                return Err(SubjectError::Shape(format!(
                    "origin embeds {:.3e} away from h",
                    d.sqrt()
                )));
            }
        }
        Ok(())
    }
}

/// `‖phi(x) − phi(x̃)‖²` for single samples.
pub fn fiber_loss(subject: &dyn SubjectModel, x: &Tensor, xt: &Tensor) -> Result<f64, SubjectError> {
    let a = subject.embed(&x.clone().reshape(&[1, x.len()])?)?;
    let b = subject.embed(&xt.clone().reshape(&[1, xt.len()])?)?;
    Ok(a.sub(&b)?.norm_sq())
}

/// `‖h − phi(x_i)‖²` for every row of `samples`.
pub fn fiber_losses_to(
    subject: &dyn SubjectModel,
    h: &Tensor,
    samples: &Tensor,
) -> Result<Vec<f64>, SubjectError> {
    let e = subject.embed(&samples.as_matrix())?;
    if e.cols() != h.len() {
        return Err(SubjectError::Shape(format!(
            "target has {} features, subject produces {}",
            h.len(),
            e.cols()
        )));
    }
    Ok((0..e.rows())
        .map(|i| e.row(i).iter().zip(h.data()).map(|(a, b)| (a - b).powi(2)).sum())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestNeighbor {
    pub index: usize,
    pub sample: Tensor,
    pub loss: f64,
}

/// Dataset row with the smallest fiber loss to the target; rows identical to
/// the target's origin are skipped.
pub fn nearest_neighbor_baseline(
    subject: &dyn SubjectModel,
    target: &FiberTarget,
    dataset: &Tensor,
) -> Result<NearestNeighbor, SubjectError> {
    let losses = fiber_losses_to(subject, &target.h, dataset)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        if let Some(o) = &target.origin {
            if dataset.row(i) == o.data() {
                continue;
            }
        }
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    let (index, loss) = best.ok_or(SubjectError::EmptyCandidates)?;
    Ok(NearestNeighbor {
        index,
        sample: dataset.row_tensor(index),
        loss,
    })
}

/// `dim x − rank(Dphi(x))`, counting singular values above `tol · σ_max`.
pub fn fiber_dimension(subject: &dyn SubjectModel, x: &Tensor, tol: f64) -> Result<usize, SubjectError> {
    let (d, m) = (x.len(), subject.output_dim());
    let x = x.clone().reshape(&[1, d])?;
    let mut jac = DMatrix::<f64>::zeros(m, d);
    for j in 0..m {
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let e = subject.embed_tape(&mut tape, v)?;
        let ej = tape.gather(e, vec![j], &[1])?;
        let out = tape.sum(ej)?;
        let mut g = tape.backward(out)?;
        let row = g.take(v);
        if !row.is_finite() {
            return Err(crate::numerics::NumericsError::NonFinite { op: "jacobian" }.into());
        }
        for (k, &val) in row.data().iter().enumerate() {
            jac[(j, k)] = val;
        }
    }
    let sv = jac.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rank = if smax > 0.0 {
        sv.iter().filter(|&&s| s > tol * smax).count()
    } else {
        0
    };
    Ok(d - rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{stream_rng, Mlp};
    use crate::subject::{colorize, ColorGlyphSubject, ColorTriple, Grid, LinearSubject};
    use rand::Rng;

    #[test]
    fn fiber_loss_basics() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0]]).unwrap();
        let s = LinearSubject::new(&a, "lin").unwrap();
        let x = Tensor::vector(vec![0.3, 0.1, -0.7]);
        let y = Tensor::vector(vec![-0.2, 0.9, 0.4]);
        assert_eq!(fiber_loss(&s, &x, &x).unwrap(), 0.0);
        let diff = a.matmul(&x.sub(&y).unwrap().reshape(&[3, 1]).unwrap()).unwrap();
        assert!((fiber_loss(&s, &x, &y).unwrap() - diff.norm_sq()).abs() < 1e-12);
        assert_eq!(fiber_loss(&s, &x, &y).unwrap(), fiber_loss(&s, &y, &x).unwrap());
    }

    #[test]
    fn nearest_neighbor_cases() {
        let s = LinearSubject::new(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), "x1").unwrap();
        let origin = Tensor::vector(vec![0.5, 0.0]);
        let t = FiberTarget::from_origin(&s, &origin).unwrap();
        let data = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.9, 1.0], vec![0.5, 3.0]]).unwrap();
        let nn = nearest_neighbor_baseline(&s, &t, &data).unwrap();
        assert_eq!((nn.index, nn.loss), (2, 0.0));
        let single = Tensor::from_rows(&[vec![7.0, 7.0]]).unwrap();
        let nn = nearest_neighbor_baseline(&s, &t, &single).unwrap();
        assert_eq!(nn.sample.data(), &[7.0, 7.0]);
        let only_origin = Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap();
        assert!(matches!(
            nearest_neighbor_baseline(&s, &t, &only_origin),
            Err(SubjectError::EmptyCandidates)
        ));
    }

    #[test]
    fn linear_fiber_dimension() {
        let a = Tensor::from_rows(&[
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let s = LinearSubject::new(&a, "rank2").unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(fiber_dimension(&s, &x, 1e-8).unwrap(), 2);
        let z = LinearSubject::new(&Tensor::zeros(&[2, 4]), "zero").unwrap();
        assert_eq!(fiber_dimension(&z, &x, 1e-8).unwrap(), 4);
    }

    #[test]
    fn glyph_ambient_fiber_dimension() {
        let mut rng = stream_rng(6, 0);
        let (h, w) = (5, 5);
        let n = h * w;
        let mut g = Grid::zeros(h, w);
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                g.data[r * w + c] = rng.random();
            }
        }
        let c = ColorTriple([0.7, 0.5, 0.1]);
        let x = Tensor::vector(colorize(&g, c).unwrap().data);
        // Decolorization with the background color held fixed is linear.
        let mut a = Tensor::zeros(&[n, 3 * n]);
        for p in 0..n {
            for ch in 0..3 {
                a.data_mut()[p * 3 * n + ch * n + p] = 1.0 / (3.0 * crate::subject::channel_span(c.0[ch]));
            }
        }
        let known = LinearSubject::new(&a, "known-c").unwrap();
        assert_eq!(fiber_dimension(&known, &x, 1e-8).unwrap(), 2 * n);
        // Estimating the color from the border adds the joint shift of the
        // border median and every pixel as one more invariant direction.
        let s = ColorGlyphSubject::flatten(h, w);
        assert_eq!(fiber_dimension(&s, &x, 1e-8).unwrap(), 2 * n + 1);
    }

    #[test]
    fn target_validation() {
        let s = ColorGlyphSubject::encoder(2, 2, Mlp::identity(4), "ae").unwrap();
        let x = Tensor::vector(colorize(&Grid::zeros(2, 2), ColorTriple([0.1, 0.2, 0.3])).unwrap().data);
        let mut t = FiberTarget::from_origin(&s, &x).unwrap();
        t.validate(&s).unwrap();
        t.h.data_mut()[0] += 1e-6;
        assert!(t.validate(&s).is_err());
    }
}
