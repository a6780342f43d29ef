//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates vector-Jacobian products. Nodes that do not depend on any
//! [`Tape::var`] leaf are never visited during the backward pass, so network
//! weights can be placed on the tape as constants for free.
//!
//! Every forward operation checks its output for non-finite entries and
//! reports the name of the offending operation.

use std::sync::Arc;

use super::{Activation, NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A user-supplied differentiable operation.
///
/// `vjp` receives the forward inputs, the forward output and the incoming
/// gradient and must return one gradient per input, shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    AffineConst {
        x: Var,
        w: Arc<Tensor>,
    },
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MulConst(Var, Tensor),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check(value: Tensor, op: &'static str) -> Result<Tensor, NumericsError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn column_sums(g: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// `g * w^T` for `g: [n, out]`, `w: [in, out]`.
fn times_transpose(g: &Tensor, w: &Tensor) -> Tensor {
    let (n, out) = (g.rows(), g.cols());
    let inp = w.rows();
    let mut data = vec![0.0; n * inp];
    super::tensor::gemm(n, out, inp, g.data(), false, w.data(), true, &mut data, 0.0);
    Tensor::matrix(n, inp, data).expect("gemm shape")
}

/// `x^T * g` for `x: [n, in]`, `g: [n, out]`.
fn transpose_times(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, inp) = (x.rows(), x.cols());
    let out = g.cols();
    let mut data = vec![0.0; inp * out];
    super::tensor::gemm(inp, n, out, x.data(), true, g.data(), false, &mut data, 0.0);
    Tensor::matrix(inp, out, data).expect("gemm shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, value: Tensor, op: Op, name: &'static str, needs: bool) -> Result<Var, NumericsError> {
        let value = check(value, name)?;
        Ok(self.push(value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.ng(a) || self.ng(b);
        self.record(value, Op::MatMul(a, b), "matmul", needs)
    }

    /// `x * w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let mut value = self.value(x).matmul(self.value(w))?;
        add_row_in_place(&mut value, self.value(b), "affine")?;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.record(value, Op::Affine { x, w, b }, "affine", needs)
    }

    /// Affine map with shared, non-differentiable parameters.
    pub fn affine_const(
        &mut self,
        x: Var,
        w: Arc<Tensor>,
        b: Option<Arc<Tensor>>,
    ) -> Result<Var, NumericsError> {
        let mut value = self.value(x).matmul(&w)?;
        if let Some(b) = &b {
            add_row_in_place(&mut value, b, "affine_const")?;
        }
        let needs = self.ng(x);
        self.record(value, Op::AffineConst { x, w }, "affine_const", needs)
    }

    /// Broadcast-adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let mut value = self.value(x).clone();
        add_row_in_place(&mut value, self.value(b), "add_row")?;
        let needs = self.ng(x) || self.ng(b);
        self.record(value, Op::AddRow(x, b), "add_row", needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.ng(a) || self.ng(b);
        self.record(value, Op::Add(a, b), "add", needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.ng(a) || self.ng(b);
        self.record(value, Op::Sub(a, b), "sub", needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.ng(a) || self.ng(b);
        self.record(value, Op::Mul(a, b), "mul", needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        let value = self.value(x).scale(s);
        let needs = self.ng(x);
        self.record(value, Op::Scale(x, s), "scale", needs)
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Vec<f64>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if s.len() != xv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                expected: format!("{} row scales", xv.rows()),
                actual: format!("{}", s.len()),
            });
        }
        let mut value = xv.clone();
        for (i, &si) in s.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= si);
        }
        let needs = self.ng(x);
        self.record(value, Op::ScaleRows(x, s), "scale_rows", needs)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var, NumericsError> {
        let value = self.value(x).mul(&c)?;
        let needs = self.ng(x);
        self.record(value, Op::MulConst(x, c), "mul_const", needs)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.ng(x);
        self.record(value, Op::Silu(x), "silu", needs)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(f64::tanh);
        let needs = self.ng(x);
        self.record(value, Op::Tanh(x), "tanh", needs)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var, NumericsError> {
        match act {
            Activation::Linear => Ok(x),
            Activation::Silu => self.silu(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(|v| v * v);
        let needs = self.ng(x);
        self.record(value, Op::Square(x), "square", needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.ng(x);
        self.record(value, Op::Sum(x), "sum", needs)
    }

    /// Per-row sums: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let value = Tensor::vector((0..xv.rows()).map(|i| xv.row(i).iter().sum()).collect());
        let needs = self.ng(x);
        self.record(value, Op::SumRows(x), "sum_rows", needs)
    }

    /// Per-row squared norms of `a - b`: `[n, m] -> [n]`.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.sum_rows(sq)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("{rows} rows"),
                    actual: format!("{} rows", v.rows()),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        self.record(value, Op::ConcatCols(parts.to_vec()), "concat_cols", needs)
    }

    /// Flat gather: `out[j] = x[idx[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                expected: format!("indices < {}", xv.len()),
                actual: format!("{bad}"),
            });
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let needs = self.ng(x);
        self.record(value, Op::Gather(x, idx), "gather", needs)
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var, NumericsError> {
        let name = op.name();
        let needs = inputs.iter().any(|&i| self.ng(i));
        self.record(value, Op::Custom(inputs.to_vec(), op), name, needs)
    }

    /// Back-propagates from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients, NumericsError> {
        if self.value(out).len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                expected: "scalar output".into(),
                actual: format!("{:?}", self.value(out).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(self.value(out).shape().to_vec(), vec![1.0])?);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let mut acc = |v: Var, d: Tensor| -> Result<(), NumericsError> {
            if !self.ng(v) {
                return Ok(());
            }
            let d = check(d, "backward")?;
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &d)?,
                slot @ None => {
                    let shape = self.value(v).shape().to_vec();
                    *slot = Some(d.reshape(&shape)?);
                }
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, times_transpose(g, self.value(*b)))?;
                }
                if self.ng(*b) {
                    acc(*b, transpose_times(self.value(*a), g))?;
                }
            }
            Op::Affine { x, w, b } => {
                if self.ng(*x) {
                    acc(*x, times_transpose(g, self.value(*w)))?;
                }
                if self.ng(*w) {
                    acc(*w, transpose_times(self.value(*x), g))?;
                }
                if self.ng(*b) {
                    acc(*b, column_sums(g))?;
                }
            }
            Op::AffineConst { x, w, .. } => acc(*x, times_transpose(g, w))?,
            Op::AddRow(x, b) => {
                acc(*x, g.clone())?;
                if self.ng(*b) {
                    acc(*b, column_sums(g))?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::ScaleRows(x, s) => {
                let mut d = g.clone();
                for (i, &si) in s.iter().enumerate() {
                    d.row_mut(i).iter_mut().for_each(|v| *v *= si);
                }
                acc(*x, d)?;
            }
            Op::MulConst(x, c) => acc(*x, g.mul(c)?)?,
            Op::Silu(x) => {
                let d = self.value(*x).zip_map(g, "silu", |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })?;
                acc(*x, d)?;
            }
            Op::Tanh(x) => {
                let d = node.value.zip_map(g, "tanh", |y, gv| gv * (1.0 - y * y))?;
                acc(*x, d)?;
            }
            Op::Square(x) => {
                let d = self.value(*x).zip_map(g, "square", |v, gv| 2.0 * v * gv)?;
                acc(*x, d)?;
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), g.data()[0]))?;
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for i in 0..xv.rows() {
                    let gi = g.data()[i];
                    d.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = gi);
                }
                acc(*x, d)?;
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        acc(p, Tensor::matrix(rows, pc, data)?)?;
                    }
                    offset += pc;
                }
            }
            Op::Gather(x, idx) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (j, &i) in idx.iter().enumerate() {
                    d.data_mut()[i] += g.data()[j];
                }
                acc(*x, d)?;
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = op.vjp(&vals, &node.value, g);
                for (&v, d) in inputs.iter().zip(ds) {
                    if d.len() != self.value(v).len() {
                        return Err(NumericsError::ShapeMismatch {
                            op: op.name(),
                            expected: format!("{:?}", self.value(v).shape()),
                            actual: format!("{:?}", d.shape()),
                        });
                    }
                    acc(v, d)?;
                }
            }
        }
        Ok(())
    }
}

fn add_row_in_place(x: &mut Tensor, b: &Tensor, op: &'static str) -> Result<(), NumericsError> {
    let c = x.cols();
    if b.len() != c {
        return Err(NumericsError::ShapeMismatch {
            op,
            expected: format!("bias of length {c}"),
            actual: format!("{}", b.len()),
        });
    }
    for i in 0..x.rows() {
        for (v, bv) in x.row_mut(i).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(())
}

/// Gradient of the scalar function `f` at `x`.
pub fn reverse_grad<F>(f: F, x: &Tensor) -> Result<Tensor, NumericsError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    value_and_grad(f, x).map(|(_, g)| g)
}

/// Value and gradient of the scalar function `f` at `x`.
pub fn value_and_grad<F>(f: F, x: &Tensor) -> Result<(f64, Tensor), NumericsError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.scalar_value(out);
    let mut grads = tape.backward(out)?;
    Ok((value, grads.take(xv)))
}
