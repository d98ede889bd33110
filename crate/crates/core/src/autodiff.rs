//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves either own
//! their value or borrow it (model parameters are borrowed so that building a
//! tape does not copy weights). [`Graph::backward`] walks the tape once in
//! reverse and returns the gradient of a scalar root with respect to every
//! node that requires one.
//!
//! Shapes are explicit: there is no broadcasting except through
//! [`Graph::scale`] and [`Graph::add_scalar`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, matmul_into, norm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Log(Var),
    Exp(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Cosine(Var, Var),
    Normalize(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
    Stack(Vec<Var>),
    Reshape(Var),
    StopGradient,
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape. Parameters borrowed into it must outlive it.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.rows(), t.cols()))
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn borrowed(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + s).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_2d("transpose", t)?;
        let out = t.transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("softmax_rows", t)?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| libm::log(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| libm::exp(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Sum of a matrix over `axis`, keeping the reduced axis with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("sum_axis", t)?;
        let out = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                Tensor::new(vec![1, c], out)?
            }
            1 => {
                let out = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
                Tensor::new(vec![r, 1], out)?
            }
            _ => return Err(invalid("sum_axis: axis must be 0 or 1")),
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = {
            let t = self.value(a);
            require_2d("mean_axis", t)?;
            t.shape()[axis.min(1)]
        };
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat: no inputs"));
        }
        let first = self.value(parts[0]);
        let (r0, c0) = require_2d("concat", first)?;
        let out = match axis {
            0 => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = require_2d("concat", t)?;
                    if c != c0 {
                        return Err(shape_err("concat", first, t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = require_2d("concat", t)?;
                    if r != r0 {
                        return Err(shape_err("concat", first, t));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let t = self.value(p);
                        let c = t.cols();
                        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
            _ => return Err(invalid("concat: axis must be 0 or 1")),
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_2d("slice", t)?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > limit {
            return Err(invalid(alloc::format!(
                "slice: range {start}..{end} on axis {axis} of shape {:?}",
                t.shape()
            )));
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&t.data()[i * c + start..i * c + end]);
            }
            Tensor::new(vec![r, w], data)?
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = require_2d("gather", t)?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(invalid(alloc::format!("gather: id {id} out of range for {r} rows")));
            }
            data.extend_from_slice(&t.data()[id * c..(id + 1) * c]);
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_2d("layer_norm", t)?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != c || b.numel() != c {
            return Err(shape_err("layer_norm", t, g));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Cosine similarity of two equally sized tensors viewed as vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(shape_err("cosine", ta, tb));
        }
        let (na, nb) = (norm(ta.data()), norm(tb.data()));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numerical("cosine: zero-norm input".into()));
        }
        let c = dot(ta.data(), tb.data()) / (na * nb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// Divide by the L2 norm of the whole tensor.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = norm(t.data());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numerical("normalize: zero or non-finite norm".into()));
        }
        let data = t.data().iter().map(|v| v / n).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Normalize(a), rg))
    }

    /// Cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        let n = t.numel();
        if target >= n {
            return Err(invalid(alloc::format!(
                "cross_entropy: target {target} out of range for {n} logits"
            )));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(t.data().iter().map(|v| libm::exp(v - max)).sum::<f64>());
        let loss = lse - t.data()[target];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, rg))
    }

    /// Stack one-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(items.len());
        for &v in items {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                });
            }
            data.push(t.item());
        }
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::vector(data), Op::Stack(items.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if !rt.is_scalar() && !(rt.numel() == 1 && rt.shape().is_empty()) {
            return Err(invalid(alloc::format!(
                "backward: root must be a scalar, got shape {:?}",
                rt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if self.rg(root) {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.get();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| axpy(d, *s, g)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, 1.0, g)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G * B^T
                if self.rg(*a) {
                    let bt = tb.transpose();
                    self.acc(grads, *a, |d| matmul_into(g, bt.data(), d, m, n, k));
                }
                // dB = A^T * G
                self.acc(grads, *b, |d| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ta.data()[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            axpy(&mut d[p * n..(p + 1) * n], s, g_row);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let s = dot(g, y);
                        for j in 0..y.len() {
                            d[j] += y[j] * (g[j] - s);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y;
                }
            }),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let t = self.value(*a);
                let (r, c) = (t.rows(), t.cols());
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::SumAll(a) => self.acc(grads, *a, |d| {
                for d in d.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.acc(grads, p, |d| axpy(d, 1.0, &g[off..off + n]));
                        off += n;
                    }
                } else {
                    let (r, total) = (out.rows(), out.cols());
                    let mut col = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        self.acc(grads, p, |d| {
                            for i in 0..r {
                                axpy(
                                    &mut d[i * c..(i + 1) * c],
                                    1.0,
                                    &g[i * total + col..i * total + col + c],
                                );
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let c_in = self.value(*input).cols();
                let (r, w) = (out.rows(), out.cols());
                self.acc(grads, *input, |d| {
                    if *axis == 0 {
                        axpy(&mut d[start * c_in..(start + r) * c_in], 1.0, g);
                    } else {
                        for i in 0..r {
                            axpy(
                                &mut d[i * c_in + start..i * c_in + start + w],
                                1.0,
                                &g[i * w..(i + 1) * w],
                            );
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = out.cols();
                self.acc(grads, *table, |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut d[id * c..(id + 1) * c], 1.0, &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (out.rows(), out.cols());
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for i in 0..r {
                        axpy(d, 1.0, &g[i * c..(i + 1) * c]);
                    }
                });
                self.acc(grads, *x, |d| {
                    let cf = c as f64;
                    for i in 0..r {
                        let gh: Vec<f64> = (0..c).map(|j| g[i * c + j] * gv[j]).collect();
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mean_gh = gh.iter().sum::<f64>() / cf;
                        let mean_ghx = dot(&gh, xh) / cf;
                        for j in 0..c {
                            d[i * c + j] += rstd[i] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (norm(va), norm(vb));
                let c = out.item();
                let g0 = g[0];
                self.acc(grads, *a, |d| {
                    for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *d += g0 * (y / (na * nb) - c * x / (na * na));
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *d += g0 * (x / (na * nb) - c * y / (nb * nb));
                    }
                });
            }
            Op::Normalize(a) => {
                let n = norm(self.value(*a).data());
                let y = out.data();
                let yg = dot(y, g);
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += (g - y * yg) / n;
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let t = self.value(*logits).data();
                let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = t.iter().map(|v| libm::exp(v - max)).sum();
                let g0 = g[0];
                self.acc(grads, *logits, |d| {
                    for (j, (d, v)) in d.iter_mut().zip(t).enumerate() {
                        let p = libm::exp(v - max) / z;
                        *d += g0 * (p - if j == *target { 1.0 } else { 0.0 });
                    }
                });
            }
            Op::Stack(items) => {
                for (i, &v) in items.iter().enumerate() {
                    self.acc(grads, v, |d| d[0] += g[i]);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.get().numel()]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient buffer, `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like `v`; zeros when nothing reached it.
    pub fn wrt(&self, graph: &Graph<'_>, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Move the gradient buffer for `v` out.
    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
