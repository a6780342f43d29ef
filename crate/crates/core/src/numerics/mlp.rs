use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{NumericsError, Tape, Tensor, Var};

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Silu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Silu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Silu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Silu => v * (1.0 / (1.0 + (-v).exp())),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// One affine layer `y = act(x W + b)` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward network; shared weights make clones cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Tape handles for an [`Mlp`]'s parameters, in [`Mlp::params_mut`] order.
pub struct BoundParams {
    vars: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NumericsError> {
        if layers.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "mlp",
                expected: "at least one layer".into(),
                actual: "0".into(),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.out_dim() {
                return Err(NumericsError::ShapeMismatch {
                    op: "mlp",
                    expected: format!("layer {i}: weight [in, out] and bias [out]"),
                    actual: format!("{:?} / {:?}", l.weight.shape(), l.bias.shape()),
                });
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(NumericsError::NonFinite { op: "mlp" });
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NumericsError::ShapeMismatch {
                    op: "mlp",
                    expected: format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    actual: format!("{}", pair[1].in_dim()),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Random initialization with `dims = [in, h1, ..., out]`; hidden layers
    /// use `hidden`, the output layer is linear.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let std = (1.0 / fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer {
                    weight: Arc::new(Tensor::matrix(fan_in, fan_out, w).expect("dims")),
                    bias: Arc::new(Tensor::zeros(&[fan_out])),
                    activation: if i + 1 == n { Activation::Linear } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            layers: vec![Layer {
                weight: Arc::new(w),
                bias: Arc::new(Tensor::zeros(&[dim])),
                activation: Activation::Linear,
            }],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NumericsError> {
        if x.cols() != self.input_dim() {
            return Err(NumericsError::ShapeMismatch {
                op: "mlp_apply",
                expected: format!("{} input features", self.input_dim()),
                actual: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Plain forward evaluation of a batch `[n, input_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        self.check_input(x)?;
        let mut h = x.as_matrix();
        for l in &self.layers {
            let mut out = h.matmul(&l.weight)?;
            for i in 0..out.rows() {
                for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                    *v = l.activation.apply(*v + l.bias.data()[j]);
                }
            }
            h = out;
        }
        if !h.is_finite() {
            return Err(NumericsError::NonFinite { op: "mlp_apply" });
        }
        Ok(h)
    }

    /// Forward pass on a tape with the weights held constant.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for l in &self.layers {
            h = tape.affine_const(h, l.weight.clone(), Some(l.bias.clone()))?;
            h = tape.activation(h, l.activation)?;
        }
        Ok(h)
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.var((*l.weight).clone()), tape.var((*l.bias).clone())))
            .collect();
        BoundParams { vars }
    }

    /// Forward pass through parameters previously placed with [`Mlp::bind`].
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
    ) -> Result<Var, NumericsError> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().zip(&params.vars) {
            h = tape.affine(h, w, b)?;
            h = tape.activation(h, l.activation)?;
        }
        Ok(h)
    }

    /// Mutable parameter tensors: `w0, b0, w1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [Arc::make_mut(&mut l.weight), Arc::make_mut(&mut l.bias)])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_ref(), l.bias.as_ref()])
            .collect()
    }
}
