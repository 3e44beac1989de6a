//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so a node's inputs always precede it and
//! the backward sweep is a single reverse pass over the record.
//!
//! Only leaves created with [`Tape::leaf`] receive gradients. Nodes that do
//! not depend on any leaf are never visited on the way back, which keeps the
//! cost of large constant operands (propagated graph embeddings) to the
//! forward pass only.

use super::spd::{factor_with_jitter, Cholesky};
use super::DenseMatrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    /// `x / exp(log_tau)`, `log_tau` a 1×1 node.
    TempScale(Var, Var),
    LogSoftmaxRows(Var),
    /// Row log-softmax of `x / exp(log_tau)`.
    LogSoftmaxTemp(Var, Var),
    SpdSolve(Var, Var, Box<Cholesky>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(Var, DenseMatrix)>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&DenseMatrix> {
        self.grads.iter().find(|(v, _)| *v == leaf).map(|(_, g)| g)
    }

    pub fn take(&mut self, leaf: Var) -> Option<DenseMatrix> {
        let pos = self.grads.iter().position(|(v, _)| *v == leaf)?;
        Some(self.grads.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn check_scalar(op: &'static str, a: &DenseMatrix) -> Result<f64> {
    if a.shape() != (1, 1) {
        return Err(Error::dim(op, format!("expected 1x1, got {:?}", a.shape())));
    }
    Ok(a.get(0, 0))
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// `g - softmax ⊙ rowsum(g)` given the log-softmax output.
fn log_softmax_backward(logp: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let mut out = g.clone();
    for i in 0..out.rows() {
        let gs: f64 = g.row(i).iter().sum();
        let lp = logp.row(i);
        for (o, &l) in out.row_mut(i).iter_mut().zip(lp) {
            *o -= l.exp() * gs;
        }
    }
    out
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

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `x / τ` with `τ = exp(log_tau)`.
    pub fn temp_scale(&mut self, x: Var, log_tau: Var) -> Result<Var> {
        let lt = check_scalar("temp_scale", self.value(log_tau))?;
        let inv = (-lt).exp();
        let v = self.value(x).scale(inv);
        let ng = self.ng(x) || self.ng(log_tau);
        Ok(self.push(v, Op::TempScale(x, log_tau), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::LogSoftmaxRows(x), ng)
    }

    /// Row log-softmax of `x / exp(log_tau)`.
    pub fn log_softmax_temp(&mut self, x: Var, log_tau: Var) -> Result<Var> {
        let lt = check_scalar("log_softmax_temp", self.value(log_tau))?;
        let v = log_softmax_rows(&self.value(x).scale((-lt).exp()));
        let ng = self.ng(x) || self.ng(log_tau);
        Ok(self.push(v, Op::LogSoftmaxTemp(x, log_tau), ng))
    }

    /// Solves `M·X = B` for SPD `M` (one jitter retry).
    pub fn spd_solve(&mut self, m: Var, b: Var) -> Result<Var> {
        let mv = self.value(m);
        let bv = self.value(b);
        if mv.rows() != mv.cols() || mv.rows() != bv.rows() {
            return Err(Error::dim("spd_solve", format!("{:?} \\ {:?}", mv.shape(), bv.shape())));
        }
        if !mv.is_finite() || !bv.is_finite() {
            return Err(Error::NonFinite("spd_solve input".into()));
        }
        let chol = factor_with_jitter(mv)?;
        let x = chol.solve(bv)?;
        let ng = self.ng(m) || self.ng(b);
        Ok(self.push(x, Op::SpdSolve(m, b, Box::new(chol)), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let v = DenseMatrix::scalar(m.sum() / n);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Reverse sweep from a 1×1 `loss`. Returns one gradient per leaf; leaves
    /// the loss does not depend on get zero matrices.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        check_scalar("backward", self.value(loss))
            .map_err(|_| Error::Precondition("backward requires a scalar (1x1) loss".into()))?;

        let mut grads: Vec<Option<DenseMatrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| DenseMatrix::zeros(n.value.rows(), n.value.cols()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let mut acc = |v: Var, contrib: DenseMatrix| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b))?);
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?);
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y)?),
            Op::TempScale(x, lt) => {
                let inv = (-self.value(*lt).get(0, 0)).exp();
                if self.ng(*x) {
                    acc(*x, g.scale(inv));
                }
                if self.ng(*lt) {
                    let d: f64 = g.data().iter().zip(node.value.data()).map(|(a, b)| a * b).sum();
                    acc(*lt, DenseMatrix::scalar(-d));
                }
            }
            Op::LogSoftmaxRows(x) => acc(*x, log_softmax_backward(&node.value, g)),
            Op::LogSoftmaxTemp(x, lt) => {
                let inv = (-self.value(*lt).get(0, 0)).exp();
                let ds = log_softmax_backward(&node.value, g);
                if self.ng(*x) {
                    acc(*x, ds.scale(inv));
                }
                if self.ng(*lt) {
                    let d: f64 = ds
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b * inv)
                        .sum();
                    acc(*lt, DenseMatrix::scalar(-d));
                }
            }
            Op::SpdSolve(m, b, chol) => {
                // X = M⁻¹B  ⇒  B̄ = M⁻ᵀX̄,  M̄ = −B̄·Xᵀ
                let gb = chol.solve(g)?;
                if self.ng(*m) {
                    acc(*m, gb.matmul_t(&node.value)?.scale(-1.0));
                }
                if self.ng(*b) {
                    acc(*b, gb);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, DenseMatrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                acc(*a, DenseMatrix::filled(r, c, g.get(0, 0) / n));
            }
        }
        Ok(())
    }
}
