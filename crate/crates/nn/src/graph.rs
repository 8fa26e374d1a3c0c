//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`] walks the tape in
//! reverse. Elementwise binary ops broadcast a 1-row or 1-column operand.

use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use specret_core::spectra::{softclamp_derivative, softclamp_scalar};
use specret_core::{Error, Result};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Swish,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Softclamp(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, leaving 1×c.
    Rows,
    /// Reduce over columns, leaving r×1.
    Cols,
    All,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var, Axis, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    NormRows(Var),
    CosineRows(Var, Var),
    SpectralConv { x: Var, wr: Var, wi: Var },
}

impl Op {
    fn label(&self) -> String {
        match self {
            Op::Input => "input".into(),
            Op::Param(_) => "param".into(),
            Op::Unary(_, u) => format!("{u:?}"),
            Op::Binary(_, _, b) => format!("{b:?}"),
            Op::Scale(..) => "scale".into(),
            Op::AddScalar(..) => "add_scalar".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::Sum(_, a, _) => format!("sum({a:?})"),
            Op::Transpose(_) => "transpose".into(),
            Op::SoftmaxRows(_) => "softmax".into(),
            Op::ConcatCols(_) => "concat_cols".into(),
            Op::ConcatRows(_) => "concat_rows".into(),
            Op::SliceCols(..) => "slice_cols".into(),
            Op::SliceRows(..) => "slice_rows".into(),
            Op::NormRows(_) => "norm_rows".into(),
            Op::CosineRows(..) => "cosine_rows".into(),
            Op::SpectralConv { .. } => "spectral_conv".into(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Unary(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a, _, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::NormRows(a) => vec![*a],
            Op::Binary(a, b, _) | Op::MatMul(a, b) | Op::CosineRows(a, b) => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SpectralConv { x, wr, wi } => vec![*x, *wr, *wi],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode gradients of one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to a node, `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for i in 0..g.rows {
        let oi = if shape.0 == 1 { 0 } else { i };
        for j in 0..g.cols {
            let oj = if shape.1 == 1 { 0 } else { j };
            *out.at_mut(oi, oj) += g.at(i, j);
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn unary_forward(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Swish => x * sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Softclamp(lo, hi) => softclamp_scalar(x, lo, hi),
    }
}

/// d/dx given input `x` and output `y`.
fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Swish => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Softclamp(lo, hi) => softclamp_derivative(x, lo, hi),
    }
}

/// Retained-mode count and per-mode weight c_k of the real inverse transform.
fn irfft_weight(k: usize, n: usize) -> f64 {
    if k == 0 || (n % 2 == 0 && k == n / 2) {
        1.0
    } else {
        2.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Pass it through [`Graph::input_tracked`] to receive its gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// An input whose gradient is recorded.
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let value = self.value(a).map(|x| unary_forward(u, x));
        self.push(value, Op::Unary(a, u))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Swish)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn softclamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi);
        self.unary(a, Unary::Softclamp(lo, hi))
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(ta.shape(), tb.shape());
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let ia = if ta.rows == 1 { 0 } else { i };
            let ib = if tb.rows == 1 { 0 } else { i };
            for j in 0..c {
                let x = ta.at(ia, if ta.cols == 1 { 0 } else { j });
                let y = tb.at(ib, if tb.cols == 1 { 0 } else { j });
                out.data[i * c + j] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            }
        }
        self.push(out, Op::Binary(a, b, kind))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    fn reduce(&mut self, a: Var, axis: Axis, scale: f64) -> Var {
        let t = self.value(a);
        let value = match axis {
            Axis::All => Tensor::scalar(t.data.iter().sum::<f64>() * scale),
            Axis::Rows => {
                let mut out = Tensor::zeros(1, t.cols);
                for i in 0..t.rows {
                    for (o, v) in out.data.iter_mut().zip(t.row_slice(i)) {
                        *o += v;
                    }
                }
                out.map(|v| v * scale)
            }
            Axis::Cols => Tensor::new(
                t.rows,
                1,
                (0..t.rows)
                    .map(|i| t.row_slice(i).iter().sum::<f64>() * scale)
                    .collect(),
            ),
        };
        self.push(value, Op::Sum(a, axis, scale))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Axis::All, 1.0)
    }
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        self.reduce(a, Axis::All, 1.0 / n)
    }
    /// Column sums over rows: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.reduce(a, Axis::Rows, 1.0)
    }
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows as f64;
        self.reduce(a, Axis::Rows, 1.0 / n)
    }
    /// Row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        self.reduce(a, Axis::Cols, 1.0)
    }
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).cols as f64;
        self.reduce(a, Axis::Cols, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows {
            let row = &mut out.data[i * t.cols..(i + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = parts
            .iter()
            .map(|p| self.value(*p).rows)
            .max()
            .expect("nonempty concat");
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert!(
                t.rows == rows || t.rows == 1,
                "concat_cols: {} rows vs {rows}",
                t.rows
            );
            for i in 0..rows {
                let src = t.row_slice(if t.rows == 1 { 0 } else { i });
                out.data[i * cols + off..i * cols + off + t.cols].copy_from_slice(src);
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols);
        let mut out = Tensor::zeros(t.rows, len);
        for i in 0..t.rows {
            out.data[i * len..(i + 1) * len].copy_from_slice(&t.row_slice(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows);
        let out = Tensor::new(
            len,
            t.cols,
            t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        );
        self.push(out, Op::SliceRows(a, start))
    }

    /// Euclidean norm of every row: r×c → r×1.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(
            t.rows,
            1,
            (0..t.rows)
                .map(|i| t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        );
        self.push(out, Op::NormRows(a))
    }

    /// Row-wise cosine similarity: r×c, r×c → r×1. A zero-norm row gives 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let out = (0..ta.rows)
            .map(|i| {
                let (x, y) = (ta.row_slice(i), tb.row_slice(i));
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    0.0
                } else {
                    x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
                }
            })
            .collect();
        self.push(Tensor::new(ta.rows, 1, out), Op::CosineRows(a, b))
    }

    /// Truncated Fourier convolution of every row of `x` (B×n): real FFT, keep the first m
    /// modes, apply the dense complex map R = wr + i·wi (m×m, Y_k = Σ_j R_kj X_j), inverse
    /// real FFT with the discarded modes zeroed.
    pub fn spectral_conv(&mut self, x: Var, wr: Var, wi: Var) -> Var {
        let (tx, tr, ti) = (self.value(x), self.value(wr), self.value(wi));
        let n = tx.cols;
        let m = tr.rows;
        assert_eq!(tr.shape(), (m, m));
        assert_eq!(ti.shape(), (m, m));
        assert!(m >= 1 && m <= n / 2 + 1, "{m} modes on length {n}");
        let (fwd, inv) = fft_pair(n);
        let mut out = Tensor::zeros(tx.rows, n);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for b in 0..tx.rows {
            for (c, &v) in buf.iter_mut().zip(tx.row_slice(b)) {
                *c = Complex64::new(v, 0.0);
            }
            fwd.process(&mut buf);
            let xs: Vec<Complex64> = buf[..m].to_vec();
            let mut spec = vec![Complex64::new(0.0, 0.0); n];
            for k in 0..m {
                let mut y = Complex64::new(0.0, 0.0);
                for j in 0..m {
                    y += Complex64::new(tr.at(k, j), ti.at(k, j)) * xs[j];
                }
                // real-output inverse: weight c_k/n on Re(Y_k e^{iθ})
                let c = irfft_weight(k, n) / n as f64;
                spec[k] = y * c;
            }
            inv.process(&mut spec);
            for t in 0..n {
                out.data[b * n + t] = spec[t].re;
            }
        }
        self.push(out, Op::SpectralConv { x, wr, wi })
    }

    /// Backward pass from a 1×1 loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_named(loss, None)
    }

    /// As [`Graph::backward`], naming parameters in non-finite diagnostics.
    pub fn backward_named(&self, loss: Var, store: Option<&ParamStore>) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be 1×1, got {:?}",
                lv.shape()
            )));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::Numeric(self.nonfinite_report(loss, store)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            let contribs = self.local_grads(i, &g);
            grads[i] = Some(g);
            for (v, t) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = grads.get(v.0).and_then(|g| g.as_ref()) {
                if !g.is_finite() {
                    let name = store.map_or(format!("#{}", id.0), |s| s.name(id).to_string());
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {name}"
                    )));
                }
                params.insert(id, g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn nonfinite_report(&self, loss: Var, store: Option<&ParamStore>) -> String {
        let first = (0..=loss.0).find(|&i| !self.nodes[i].value.is_finite());
        match first {
            Some(i) => {
                let node = &self.nodes[i];
                let params: Vec<String> = node
                    .op
                    .inputs()
                    .iter()
                    .filter_map(|v| match self.nodes[v.0].op {
                        Op::Param(id) => {
                            Some(store.map_or(format!("#{}", id.0), |s| s.name(id).to_string()))
                        }
                        _ => None,
                    })
                    .collect();
                let bad: Vec<String> = self
                    .param_nodes
                    .iter()
                    .filter(|(_, v)| !self.nodes[v.0].value.is_finite())
                    .map(|(id, _)| store.map_or(format!("#{}", id.0), |s| s.name(*id).to_string()))
                    .collect();
                format!(
                    "non-finite loss: first non-finite value from {} at node {i} (parameter inputs {:?}; non-finite parameters {:?})",
                    node.op.label(),
                    params,
                    bad
                )
            }
            None => "non-finite loss".into(),
        }
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Unary(a, u) => {
                let x = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .zip(&y.data)
                    .map(|((gv, xv), yv)| gv * unary_derivative(*u, *xv, *yv))
                    .collect();
                vec![(*a, Tensor::new(g.rows, g.cols, data))]
            }
            Op::Binary(a, b, kind) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                let mut gb = Tensor::zeros(tb.rows, tb.cols);
                for r in 0..g.rows {
                    let ia = if ta.rows == 1 { 0 } else { r };
                    let ib = if tb.rows == 1 { 0 } else { r };
                    for c in 0..g.cols {
                        let ja = if ta.cols == 1 { 0 } else { c };
                        let jb = if tb.cols == 1 { 0 } else { c };
                        let gv = g.at(r, c);
                        let (x, z) = (ta.at(ia, ja), tb.at(ib, jb));
                        let (da, db) = match kind {
                            Binary::Add => (gv, gv),
                            Binary::Sub => (gv, -gv),
                            Binary::Mul => (gv * z, gv * x),
                            Binary::Div => (gv / z, -gv * x / (z * z)),
                        };
                        *ga.at_mut(ia, ja) += da;
                        *gb.at_mut(ib, jb) += db;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    out.push((*a, g.matmul_t(tb)));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, ta.t_matmul(g)));
                }
                out
            }
            Op::Sum(a, axis, scale) => {
                let (r, c) = self.shape(*a);
                let t = match axis {
                    Axis::All => Tensor::filled(r, c, g.item() * scale),
                    Axis::Rows => {
                        let mut t = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                t.data[i * c + j] = g.data[j] * scale;
                            }
                        }
                        t
                    }
                    Axis::Cols => {
                        let mut t = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                t.data[i * c + j] = g.data[i] * scale;
                            }
                        }
                        t
                    }
                };
                vec![(*a, t)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::SoftmaxRows(a) => {
                let mut t = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..y.cols {
                        t.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*a, t)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (pr, pc) = self.shape(*p);
                        let mut t = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            t.data[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row_slice(r)[off..off + pc]);
                        }
                        off += pc;
                        (*p, reduce_to(&t, (pr, pc)))
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let (pr, pc) = self.shape(*p);
                        let t = Tensor::new(pr, pc, g.data[off * pc..(off + pr) * pc].to_vec());
                        off += pr;
                        (*p, t)
                    })
                    .collect()
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    t.data[i * c + start..i * c + start + g.cols].copy_from_slice(g.row_slice(i));
                }
                vec![(*a, t)]
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut t = Tensor::zeros(r, c);
                t.data[start * c..(start + g.rows) * c].copy_from_slice(&g.data);
                vec![(*a, t)]
            }
            Op::NormRows(a) => {
                let x = self.value(*a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let nrm = y.data[r];
                    if nrm > 0.0 {
                        for c in 0..x.cols {
                            t.data[r * x.cols + c] = g.data[r] * x.at(r, c) / nrm;
                        }
                    }
                }
                vec![(*a, t)]
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                let mut gb = Tensor::zeros(tb.rows, tb.cols);
                for r in 0..ta.rows {
                    let (x, z) = (ta.row_slice(r), tb.row_slice(r));
                    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nx == 0.0 || nz == 0.0 {
                        continue;
                    }
                    let cos = y.data[r];
                    for c in 0..ta.cols {
                        ga.data[r * ta.cols + c] =
                            g.data[r] * (z[c] / (nx * nz) - cos * x[c] / (nx * nx));
                        gb.data[r * ta.cols + c] =
                            g.data[r] * (x[c] / (nx * nz) - cos * z[c] / (nz * nz));
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SpectralConv { x, wr, wi } => self.spectral_conv_backward(*x, *wr, *wi, g),
        }
    }

    fn spectral_conv_backward(&self, x: Var, wr: Var, wi: Var, g: &Tensor) -> Vec<(Var, Tensor)> {
        let (tx, tr, ti) = (self.value(x), self.value(wr), self.value(wi));
        let n = tx.cols;
        let m = tr.rows;
        let (fwd, inv) = fft_pair(n);
        let mut gx = Tensor::zeros(tx.rows, n);
        let mut gr = Tensor::zeros(m, m);
        let mut gi = Tensor::zeros(m, m);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for b in 0..tx.rows {
            for (c, &v) in buf.iter_mut().zip(tx.row_slice(b)) {
                *c = Complex64::new(v, 0.0);
            }
            fwd.process(&mut buf);
            let xs: Vec<Complex64> = buf[..m].to_vec();
            for (c, &v) in buf.iter_mut().zip(g.row_slice(b)) {
                *c = Complex64::new(v, 0.0);
            }
            fwd.process(&mut buf);
            // dL/d(Re Y_k) + i·dL/d(Im Y_k) = (c_k/n)·FFT(g)_k
            let dy: Vec<Complex64> = (0..m)
                .map(|k| buf[k] * (irfft_weight(k, n) / n as f64))
                .collect();
            let mut dxs = vec![Complex64::new(0.0, 0.0); n];
            for k in 0..m {
                for j in 0..m {
                    let (xr, xi) = (xs[j].re, xs[j].im);
                    *gr.at_mut(k, j) += dy[k].re * xr + dy[k].im * xi;
                    *gi.at_mut(k, j) += -dy[k].re * xi + dy[k].im * xr;
                    let (rr, ri) = (tr.at(k, j), ti.at(k, j));
                    dxs[j].re += dy[k].re * rr + dy[k].im * ri;
                    dxs[j].im += -dy[k].re * ri + dy[k].im * rr;
                }
            }
            // x_t enters X_j through e^{−iφ}; pull back with the unnormalized inverse transform
            inv.process(&mut dxs);
            for t in 0..n {
                gx.data[b * n + t] = dxs[t].re;
            }
        }
        vec![(x, gx), (wr, gr), (wi, gi)]
    }
}
