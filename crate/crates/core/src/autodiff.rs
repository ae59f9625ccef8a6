//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is built once as a DAG of operations over named inputs and
//! constants, then evaluated repeatedly: bind inputs, call
//! [`Graph::forward`], then [`Graph::backward`] for gradients. Nodes are
//! appended in construction order, so the node list is already a
//! topological order.
//!
//! Non-finite values are not errors. They flow through both passes and the
//! caller inspects [`Tensor::is_finite`] on whatever it cares about.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        x * 0.0 // 0 stays 0, NaN stays NaN
    }
}

/// Elementwise unary operators. The epsilon-guarded ones carry their epsilon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Abs,
    /// `1 / (x + eps)`
    Inv(f64),
    /// `sign(x) * ln(|x| + eps)`
    Log(f64),
    Exp,
    Tanh,
    Square,
    /// `sign(x) * sqrt(|x| + eps)`
    Sqrt(f64),
    Relu,
}

impl UnaryOp {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Inv(eps) => 1.0 / (x + eps),
            UnaryOp::Log(eps) => sign(x) * (x.abs() + eps).ln(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt(eps) => sign(x) * (x.abs() + eps).sqrt(),
            UnaryOp::Relu => x.max(0.0),
        }
    }

    /// Derivative at `x`, given the already computed output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Abs => sign(x),
            UnaryOp::Inv(_) => -y * y,
            UnaryOp::Log(eps) => {
                let s = sign(x);
                s * s / (x.abs() + eps)
            }
            UnaryOp::Exp => y,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Sqrt(eps) => {
                let s = sign(x);
                s * s * 0.5 / (x.abs() + eps).sqrt()
            }
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const(Tensor),
    /// Elementwise; either side may be 1x1 and is then broadcast.
    Add(Var, Var),
    Mul(Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    /// Mean over all entries, giving 1x1.
    Mean(Var),
    Sum(Var),
    MatMul(Var, Var),
    /// Constant sparse matrix times a node.
    SpMM(Arc<CsrMatrix>, Var),
    /// Matrix plus a 1xK row added to every row.
    AddRow(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SelectRows(Var, Arc<[usize]>),
}

impl Op {
    fn inputs(&self) -> impl Iterator<Item = Var> {
        let (a, b) = match *self {
            Op::Input(_) | Op::Const(_) => (None, None),
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => (Some(a), Some(b)),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SpMM(_, a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SelectRows(a, _) => (Some(a), None),
        };
        a.into_iter().chain(b)
    }
}

/// Computation graph with cached forward values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    inputs: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> Var {
        for input in op.inputs() {
            assert!(input.0 < self.ops.len(), "node input from another graph");
        }
        self.ops.push(op);
        self.values.push(None);
        Var(self.ops.len() - 1)
    }

    /// Named input placeholder. Requesting the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        self.push(Op::Unary(op, a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.push(Op::Scale(a, factor))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn spmm(&mut self, adj: Arc<CsrMatrix>, x: Var) -> Var {
        self.push(Op::SpMM(adj, x))
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        self.push(Op::AddRow(m, row))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::LogSoftmaxRows(a))
    }

    pub fn select_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Var {
        self.push(Op::SelectRows(a, rows))
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.inputs.get(name).copied()
    }

    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<()> {
        let v = self
            .input_var(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        self.values[v.0] = Some(value);
        Ok(())
    }

    /// Cached value of a node from the last forward pass (inputs once bound).
    pub fn value(&self, v: Var) -> Option<&Tensor> {
        self.values.get(v.0).and_then(Option::as_ref)
    }

    /// Binds `inputs` and runs [`Graph::forward`].
    pub fn forward_with(&mut self, root: Var, inputs: Vec<(&str, Tensor)>) -> Result<&Tensor> {
        for (name, t) in inputs {
            self.bind(name, t)?;
        }
        self.forward(root)
    }

    /// Evaluates every node up to and including `root`, caching the values.
    pub fn forward(&mut self, root: Var) -> Result<&Tensor> {
        if root.0 >= self.ops.len() {
            return Err(Error::UnknownNode(root.0));
        }
        for i in 0..=root.0 {
            let value = match &self.ops[i] {
                Op::Input(name) => {
                    if self.values[i].is_none() {
                        return Err(Error::UnboundInput(name.clone()));
                    }
                    continue;
                }
                Op::Const(t) => {
                    if self.values[i].is_none() {
                        self.values[i] = Some(t.clone());
                    }
                    continue;
                }
                op => self.eval(op)?,
            };
            self.values[i] = Some(value);
        }
        Ok(self.values[root.0].as_ref().expect("root evaluated"))
    }

    fn val(&self, v: Var) -> &Tensor {
        self.values[v.0].as_ref().expect("forward visits inputs first")
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        Ok(match op {
            Op::Input(_) | Op::Const(_) => unreachable!(),
            Op::Add(a, b) => broadcast_binary("add", self.val(*a), self.val(*b), |x, y| x + y)?,
            Op::Mul(a, b) => broadcast_binary("mul", self.val(*a), self.val(*b), |x, y| x * y)?,
            Op::Unary(u, a) => self.val(*a).map(|x| u.apply(x)),
            Op::Scale(a, f) => self.val(*a).map(|x| x * f),
            Op::Mean(a) => Tensor::scalar(self.val(*a).mean()),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b))?,
            Op::SpMM(adj, x) => adj.matmul(self.val(*x))?,
            Op::AddRow(m, row) => {
                let (m, row) = (self.val(*m), self.val(*row));
                if row.rows() != 1 || row.cols() != m.cols() {
                    return Err(Error::ShapeMismatch {
                        op: "add_row",
                        lhs: m.shape(),
                        rhs: row.shape(),
                    });
                }
                let mut out = m.clone();
                let k = m.cols();
                for chunk in out.data_mut().chunks_mut(k) {
                    for (o, b) in chunk.iter_mut().zip(row.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::SoftmaxRows(a) => {
                let mut out = self.val(*a).clone();
                let k = out.cols();
                for row in out.data_mut().chunks_mut(k) {
                    let lse = log_sum_exp(row);
                    for v in row.iter_mut() {
                        *v = (*v - lse).exp();
                    }
                }
                out
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = self.val(*a).clone();
                let k = out.cols();
                for row in out.data_mut().chunks_mut(k) {
                    let lse = log_sum_exp(row);
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                out
            }
            Op::SelectRows(a, rows) => {
                let a = self.val(*a);
                if let Some(&bad) = rows.iter().find(|&&r| r >= a.rows()) {
                    return Err(Error::ShapeMismatch {
                        op: "select_rows",
                        lhs: a.shape(),
                        rhs: (bad, 0),
                    });
                }
                a.select_rows(rows)
            }
        })
    }

    /// Gradients of the scalar `root` with respect to each node in `wrt`.
    ///
    /// Requires a prior [`Graph::forward`] through `root`. Nodes that do not
    /// influence `root` get zero gradients.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let root_value = self
            .values
            .get(root.0)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownNode(root.0))?;
        if root_value.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: root_value.rows(),
                cols: root_value.cols(),
            });
        }
        let n = root.0 + 1;

        // Only nodes that depend on something in `wrt` need gradients.
        let mut needed = vec![false; n];
        for w in wrt {
            if w.0 < n {
                needed[w.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] && self.ops[i].inputs().any(|v| needed[v.0]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needed[i] {
                continue;
            }
            self.propagate(&self.ops[i], i, &g, &needed, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| {
                        let (r, c) = self.values[w.0].as_ref().map_or((1, 1), Tensor::shape);
                        Tensor::zeros(r, c)
                    })
            })
            .collect())
    }

    fn propagate(
        &self,
        op: &Op,
        out_idx: usize,
        g: &Tensor,
        needed: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !needed[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, reduce_broadcast(g.clone(), va.shape()));
                acc(*b, reduce_broadcast(g.clone(), vb.shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needed[a.0] {
                    let full = broadcast_binary("mul", g, vb, |x, y| x * y)?;
                    acc(*a, reduce_broadcast(full, va.shape()));
                }
                if needed[b.0] {
                    let full = broadcast_binary("mul", g, va, |x, y| x * y)?;
                    acc(*b, reduce_broadcast(full, vb.shape()));
                }
            }
            Op::Unary(u, a) => {
                let x = self.val(*a);
                let y = self.values[out_idx].as_ref().expect("forward ran");
                let mut d = g.clone();
                for ((d, &x), &y) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d *= u.derivative(x, y);
                }
                acc(*a, d);
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::Mean(a) => {
                let va = self.val(*a);
                let s = g.item() / va.len() as f64;
                acc(*a, Tensor::full(va.rows(), va.cols(), s));
            }
            Op::Sum(a) => {
                let va = self.val(*a);
                acc(*a, Tensor::full(va.rows(), va.cols(), g.item()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needed[a.0] {
                    acc(*a, g.matmul_t(vb)?);
                }
                if needed[b.0] {
                    acc(*b, va.t_matmul(g)?);
                }
            }
            Op::SpMM(adj, x) => acc(*x, adj.t_matmul(g)?),
            Op::AddRow(m, row) => {
                acc(*m, g.clone());
                if needed[row.0] {
                    let k = g.cols();
                    let mut col_sums = Tensor::zeros(1, k);
                    for chunk in g.data().chunks(k) {
                        for (s, v) in col_sums.data_mut().iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    acc(*row, col_sums);
                }
            }
            Op::SoftmaxRows(a) => {
                let s = self.values[out_idx].as_ref().expect("forward ran");
                let k = s.cols();
                let mut d = g.clone();
                for (drow, srow) in d.data_mut().chunks_mut(k).zip(s.data().chunks(k)) {
                    let dot: f64 = drow.iter().zip(srow).map(|(g, s)| g * s).sum();
                    for (dv, sv) in drow.iter_mut().zip(srow) {
                        *dv = sv * (*dv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let ls = self.values[out_idx].as_ref().expect("forward ran");
                let k = ls.cols();
                let mut d = g.clone();
                for (drow, lrow) in d.data_mut().chunks_mut(k).zip(ls.data().chunks(k)) {
                    let total: f64 = drow.iter().sum();
                    for (dv, lv) in drow.iter_mut().zip(lrow) {
                        *dv -= lv.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::SelectRows(a, rows) => {
                let va = self.val(*a);
                let k = va.cols();
                let mut d = Tensor::zeros(va.rows(), k);
                for (src, &r) in rows.iter().enumerate() {
                    let dst = &mut d.data_mut()[r * k..(r + 1) * k];
                    for (o, v) in dst.iter_mut().zip(g.row(src)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn broadcast_binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        Ok(a.zip_map(b, f))
    } else if b.shape() == (1, 1) {
        let s = b.item();
        Ok(a.map(|x| f(x, s)))
    } else if a.shape() == (1, 1) {
        let s = a.item();
        Ok(b.map(|y| f(s, y)))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        })
    }
}

fn reduce_broadcast(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Returns `false`, leaving everything
    /// untouched, if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: (params.len(), 0),
                rhs: (grads.len(), self.m.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        if !grads.iter().all(Tensor::is_finite) {
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}
