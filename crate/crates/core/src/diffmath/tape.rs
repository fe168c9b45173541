//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates vector-Jacobian
//! products into per-node gradient slots. Nodes that do not depend on any
//! trainable leaf are never visited on the way back.

use std::collections::HashMap;

use super::params::ParamSet;
use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the
    /// output. `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradient slots produced by [`Graph::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    /// Parameters not listed in `trainable` become constants.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let trainable = params.is_trainable(name);
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.values(), false, tb.values(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Div(a, b), rg)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        assert_eq!(tr.len(), c, "row broadcast {:?} with {:?}", ta.shape(), tr.shape());
        let r = tr.values();
        let mut out = ta.clone();
        for chunk in out.values_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = f(*o, b);
            }
        }
        out
    }

    /// `a + row` with `row` (length `cols`) broadcast over rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.row_broadcast(a, row, |x, y| x + y);
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::AddRow(a, row), rg)
    }

    /// `a * row` with `row` broadcast over rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.row_broadcast(a, row, |x, y| x * y);
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::Offset(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            let c = t.cols();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row_slice(r));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (rows, c) = (t.rows(), t.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(rows, len, out), Op::SliceCols(a, start), rg)
    }

    /// Record an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar root");
        slots[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.propagate(node, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Gradients { slots }
    }

    fn accum(&self, slots: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.values(), false, tb.values(), true, &mut da, false);
                    self.accum(slots, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.values(), true, g.values(), false, &mut db, false);
                    self.accum(slots, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, g.clone());
                self.accum(slots, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(slots, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accum(slots, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                if self.rg(*a) {
                    self.accum(slots, *a, g.zip_map(tb, |x, d| x / d));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -y/b
                    let t = g.zip_map(y, |x, q| x * q).zip_map(tb, |x, d| -x / d);
                    self.accum(slots, *b, t);
                }
            }
            Op::AddRow(a, row) => {
                self.accum(slots, *a, g.clone());
                if self.rg(*row) {
                    let mut acc = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in acc.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accum(slots, *row, Tensor::new(shape, acc).unwrap());
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let c = ta.cols();
                if self.rg(*a) {
                    let mut da = g.clone();
                    for chunk in da.values_mut().chunks_mut(c) {
                        for (o, &w) in chunk.iter_mut().zip(tr.values()) {
                            *o *= w;
                        }
                    }
                    self.accum(slots, *a, da);
                }
                if self.rg(*row) {
                    let mut acc = vec![0.0; c];
                    for r in 0..g.rows() {
                        for ((s, gv), av) in acc.iter_mut().zip(g.row_slice(r)).zip(ta.row_slice(r)) {
                            *s += gv * av;
                        }
                    }
                    self.accum(slots, *row, Tensor::new(tr.shape().to_vec(), acc).unwrap());
                }
            }
            Op::Scale(a, c) => self.accum(slots, *a, g.map(|x| c * x)),
            Op::Offset(a) => self.accum(slots, *a, g.clone()),
            Op::Sigmoid(a) => self.accum(slots, *a, g.zip_map(y, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => self.accum(slots, *a, g.zip_map(y, |x, t| x * (1.0 - t * t))),
            Op::Softplus(a) => {
                let t = g.zip_map(self.value(*a), |x, u| x * sigmoid(u));
                self.accum(slots, *a, t)
            }
            Op::Exp(a) => self.accum(slots, *a, g.zip_map(y, |x, e| x * e)),
            Op::Log(a) => self.accum(slots, *a, g.zip_map(self.value(*a), |x, u| x / u)),
            Op::Sqrt(a) => self.accum(
                slots,
                *a,
                g.zip_map(y, |x, s| if s > 0.0 { 0.5 * x / s } else { 0.0 }),
            ),
            Op::Square(a) => self.accum(slots, *a, g.zip_map(self.value(*a), |x, u| 2.0 * x * u)),
            Op::Sum(a) => {
                let s = g.values()[0];
                self.accum(slots, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let c = t.cols();
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            out.extend_from_slice(&g.values()[r * total + offset..r * total + offset + c]);
                        }
                        self.accum(slots, p, Tensor::new(t.shape().to_vec(), out).unwrap());
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (rows, c) = (src.rows(), src.cols());
                let len = g.cols();
                let mut out = vec![0.0; rows * c];
                for r in 0..rows {
                    out[r * c + start..r * c + start + len].copy_from_slice(g.row_slice(r));
                }
                self.accum(slots, *a, Tensor::new(src.shape().to_vec(), out).unwrap());
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, y, g);
                debug_assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        self.accum(slots, v, gi);
                    }
                }
            }
        }
    }

    /// Gradients of every trainable parameter touched by this graph, in the
    /// layout of `params`. Untouched parameters get zero slots.
    pub fn param_grads(&self, params: &ParamSet, grads: &Gradients) -> ParamSet {
        let mut out = params.zeros_like();
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                out.get_mut(name).expect("param registered").add_assign(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_on_scalars() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.square(x);
        let z = g.exp(y);
        let s = g.sum(z);
        let grads = g.backward(s);
        let expected = 4.0 * (4.0f64).exp();
        assert!((grads.get(x).unwrap().values()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(vec![1.0, 2.0]));
        let x = g.variable(Tensor::row(vec![3.0, 4.0]));
        let p = g.mul(c, x);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().values()[0], 7.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
