//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction. Each node records whether any differentiable leaf
//! reaches it; the backward sweep skips everything else, which keeps frozen
//! networks (constant weights) cheap while still propagating adjoints
//! through their inputs.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::tensor::{gemm, Tensor};
use crate::error::{bail, Error, Result};
use crate::math;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
///
/// `vjp` receives the input values, the forward output and the output
/// adjoint and returns one adjoint per input (`None` where the input is not
/// differentiable).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    ScaleRows(Var, Var),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSumSquares(Var),
    RowSum(Var),
    Charbonnier(Var),
    LogSoftmax(Var),
    StopGrad,
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(_, op) => write!(f, "Custom({})", op.name()),
            Op::Leaf => f.write_str("Leaf"),
            Op::Constant => f.write_str("Constant"),
            _ => f.write_str("Op"),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Forward kernels shared with the untaped evaluation paths so that both
// produce bit-identical results.

pub(crate) fn fwd_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    gemm(a.rows(), a.cols(), b.cols(), a.data(), false, b.data(), false, out.data_mut(), 0.0);
    out
}

pub(crate) fn fwd_add_row_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    out
}

pub(crate) fn fwd_tanh(x: &Tensor) -> Tensor {
    x.map(math::tanh)
}

pub(crate) fn fwd_scale(x: &Tensor, s: f64) -> Tensor {
    x.map(|v| s * v)
}

pub(crate) fn fwd_scale_rows(x: &Tensor, s: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for (row, sv) in out.data_mut().chunks_mut(c).zip(s.data()) {
        for v in row {
            *v *= sv;
        }
    }
    out
}

pub(crate) fn fwd_gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), idx.len());
    for r in 0..x.rows() {
        let src = x.row(r);
        for (o, &i) in out.row_mut(r).iter_mut().zip(idx) {
            *o = src[i];
        }
    }
    out
}

pub(crate) fn fwd_log_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let lse = math::log_sum_exp(row);
        for v in row {
            *v -= lse;
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

    /// Number of `f64` values held by the tape's forward record.
    pub fn stored_values(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (a parameter or a state being differentiated).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            bail!(Shape, "{what}: {sa:?} vs {sb:?}");
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = fwd_scale(self.value(a), s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x + bias` with a `1 × c` bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if bs != (1, xs.1) {
            bail!(Shape, "row bias {bs:?} for input {xs:?}");
        }
        let v = fwd_add_row_bias(self.value(x), self.value(bias));
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(v, Op::AddRowBias(x, bias), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.1 != sb.0 {
            bail!(Shape, "matmul {sa:?} by {sb:?}");
        }
        let v = fwd_matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = fwd_tanh(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Multiply each row of `x` by the matching entry of the `r × 1` column `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.value(x).shape(), self.value(s).shape());
        if ss != (xs.0, 1) {
            bail!(Shape, "row scale {ss:?} for input {xs:?}");
        }
        let v = fwd_scale_rows(self.value(x), self.value(s));
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::ScaleRows(x, s), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&refs)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Select columns by index; the adjoint scatters back (summing repeats).
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let c = self.value(x).cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            bail!(Shape, "column index {bad} out of range for {c} columns");
        }
        let v = fwd_gather(self.value(x), &idx);
        let ng = self.ng(x);
        Ok(self.push(v, Op::Gather(x, idx), ng))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// Mean of all entries, as a `1 × 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Squared Euclidean norm of each row, as an `r × 1` column.
    pub fn row_sum_squares(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| math::norm_sq(t.row(r))).collect();
        let v = Tensor::from_vec(t.rows(), 1, data).expect("row count");
        let ng = self.ng(a);
        self.push(v, Op::RowSumSquares(a), ng)
    }

    /// Sum of each row, as an `r × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let v = Tensor::from_vec(t.rows(), 1, data).expect("row count");
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Elementwise Charbonnier penalty `√(x² + ε²)`.
    pub fn charbonnier(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| math::sqrt(x * x + eps * eps));
        let ng = self.ng(a);
        self.push(v, Op::Charbonnier(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = fwd_log_softmax(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Identity in the forward pass; blocks all adjoint flow.
    pub fn stopgrad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Append a custom operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&p| self.ng(p));
        self.push(value, Op::Custom(inputs.to_vec(), op), ng)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!("backward needs a 1x1 root, got {shape:?}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Only leaf adjoints are kept; intermediate ones are released.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGrad => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => acc(*a, fwd_scale(g, *s)),
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), 0.0);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), 0.0);
                    acc(*b, db);
                }
            }
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))),
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.ng(*x) {
                    acc(*x, fwd_scale_rows(g, sv));
                }
                if self.ng(*s) {
                    let data = (0..g.rows()).map(|r| math::dot(g.row(r), xv.row(r))).collect();
                    acc(*s, Tensor::from_vec(g.rows(), 1, data).expect("rows"));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            Op::Gather(x, idx) => {
                let c = self.value(*x).cols();
                let mut d = Tensor::zeros(g.rows(), c);
                for r in 0..g.rows() {
                    let dst = d.row_mut(r);
                    for (&i, v) in idx.iter().zip(g.row(r)) {
                        dst[i] += v;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                acc(*a, Tensor::filled(r, c, g.item() / n));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = Tensor::zeros(av.rows(), c);
                for (row, gv) in d.data_mut().chunks_mut(c.max(1)).zip(g.data()) {
                    row.fill(*gv);
                }
                acc(*a, d);
            }
            Op::RowSumSquares(a) => {
                let av = self.value(*a);
                let mut d = av.clone();
                let c = av.cols();
                for (row, gv) in d.data_mut().chunks_mut(c.max(1)).zip(g.data()) {
                    for v in row {
                        *v *= 2.0 * gv;
                    }
                }
                acc(*a, d);
            }
            Op::Charbonnier(a) => {
                let av = self.value(*a);
                let d = av.zip_map(&node.value, |x, y| x / y).zip_map(g, |q, gv| q * gv);
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut d = g.clone();
                for (row, (grow, lrow)) in d
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c).zip(node.value.data().chunks(c)))
                {
                    let total: f64 = grow.iter().sum();
                    for (v, l) in row.iter_mut().zip(lrow) {
                        *v -= math::exp(*l) * total;
                    }
                }
                acc(*a, d);
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&p| self.value(p)).collect();
                let deltas = op.vjp(&vals, &node.value, g);
                for (&p, d) in inputs.iter().zip(deltas) {
                    if let Some(d) = d {
                        acc(p, d);
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of leaf `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, with zeros substituted when nothing reached it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Run `program` on a fresh tape and return its scalar value, the tape and
/// the root node.
pub fn record_forward<F>(program: F) -> Result<(f64, Tape, Var)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = program(&mut tape)?;
    let v = tape.value(root);
    if v.shape() != (1, 1) {
        return Err(Error::Usage(format!("program must return a scalar, got {:?}", v.shape())));
    }
    let value = v.item();
    Ok((value, tape, root))
}
