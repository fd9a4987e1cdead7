//! Reverse-mode automatic differentiation over dense matrices, the velocity
//! network, and the optimisers used to train it.

mod nn;
mod optim;

pub use nn::{sinusoidal_embedding, MlpConfig, VelocityNet};
pub use optim::{clip_grad_norm, params_hash, Adam, AdamConfig, Ema};

use crate::error::{Error, Result};
use ndarray::{concatenate, s, Array2, Axis};
use std::fmt::Debug;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation supplied from outside the tape.
pub trait CustomOp: Debug {
    /// Adjoints for each input given the output adjoint. `None` means zero.
    fn backward(&self, inputs: &[&Array2<f64>], output: &Array2<f64>, grad: &Array2<f64>) -> Result<Vec<Option<Array2<f64>>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    Silu(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    RowSqNorm(Var),
    RowDot(Var, Var),
    Mean(Var),
    Sum(Var),
    Detach,
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records matrix-valued operations for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

fn same_shape(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn sigmoid_arr(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(crate::numerics::sigmoid)
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let v = va.dot(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a + 1 b` for a row vector `b`.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::shape("add_row_bias", format!("{:?} + {:?}", va.dim(), vb.dim())));
        }
        let v = va + vb;
        Ok(self.push(v, Op::AddRowBias(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// Multiply every row of `a` by the matching entry of column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(c));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", va.dim(), vc.dim())));
        }
        let v = va * vc;
        Ok(self.push(v, Op::MulCol(a, c)))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x * &sigmoid_arr(x);
        self.push(v, Op::Silu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.ncols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {} columns", va.ncols())));
        }
        let v = va.slice(s![.., start..end]).to_owned();
        Ok(self.push(v, Op::Slice(a, start, end)))
    }

    /// Per-row squared norm, shape `[n, 1]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(1));
        self.push(v, Op::RowSqNorm(a))
    }

    /// Per-row inner product, shape `[n, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("row_dot", self.value(a), self.value(b))?;
        let v = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.sum() / va.len().max(1) as f64;
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let m = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), m), Op::Sum(a))
    }

    /// Forward identity whose parents receive no adjoint.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Array2<f64>) -> Var {
        self.push(value, Op::Custom(op, inputs.to_vec()))
    }

    /// Adjoints of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::Tape("backward called before a forward pass recorded the root".into()));
        }
        if self.nodes[root.0].value.dim() != (1, 1) {
            return Err(Error::Tape(format!("root must be a scalar, got {:?}", self.nodes[root.0].value.dim())));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Const | Op::Detach => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRowBias(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::MulCol(a, c) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g * self.value(*c));
                    acc(&mut grads, *c, gc);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let sg = sigmoid_arr(x);
                    let d = &sg * &(x * &(1.0 - &sg) + 1.0);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSqNorm(a) => acc(&mut grads, *a, self.value(*a) * &g * 2.0),
                Op::RowDot(a, b) => {
                    acc(&mut grads, *a, self.value(*b) * &g);
                    acc(&mut grads, *b, self.value(*a) * &g);
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    acc(&mut grads, *a, Array2::from_elem(va.dim(), g[[0, 0]] / va.len().max(1) as f64));
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    acc(&mut grads, *a, Array2::from_elem(va.dim(), g[[0, 0]]));
                }
                Op::Custom(op, inputs) => {
                    let vals: Vec<&Array2<f64>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&vals, &node.value, &g)?;
                    for (&v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            if gi.dim() != self.value(v).dim() {
                                return Err(Error::Tape(format!("custom op returned adjoint {:?} for input {:?}", gi.dim(), self.value(v).dim())));
                            }
                            acc(&mut grads, v, gi);
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }
}
