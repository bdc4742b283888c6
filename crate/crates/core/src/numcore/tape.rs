//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, which is a topological order
//! because a node's inputs always exist before it does. Nodes computed only
//! from constants never receive gradients.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::conv::{self, Conv2dSpec};
use crate::numcore::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient for each input given the output gradient. `None` means zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Scale(f64),
    Offset(f64),
    Square,
    Sqrt,
    Log,
    Abs,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu(f64),
    ClampMin(f64),
    Clamp(f64, f64),
    Pow(f64),
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::ClampMin(m) => x.max(m),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Pow(p) => x.powf(p),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => (x > 0.0) as u8 as f64,
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::ClampMin(m) => (x > m) as u8 as f64,
            Unary::Clamp(lo, hi) => (x > lo && x < hi) as u8 as f64,
            Unary::Pow(p) => {
                if x > 0.0 {
                    p * x.powf(p - 1.0)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PerChannel {
    Add,
    Mul,
    Prelu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    /// Second operand may hold a single element, broadcast over the first.
    Binary(Var, Var, Binary),
    PerChannel(Var, Var, PerChannel),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Matmul(Var, Var),
    Softmax(Var),
    ComplexAbs(Var, Var),
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    ConvTranspose2d { x: Var, w: Var, spec: Conv2dSpec },
    WeightNorm { v: Var, g: Var },
    CumNorm { x: Var, eps: f64 },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation. Confined to one thread of execution.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let value = self.value(x).map(|v| u.eval(v));
        self.push(value, Op::Unary(x, u), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Scale(-1.0))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Offset(c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Unary::ClampMin(floor))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    /// `x^p`; callers keep `x` positive for fractional `p`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Pow(p))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            av.zip_map(bv, |x, y| bin_eval(kind, x, y))?
        } else if bv.numel() == 1 {
            let y = bv.item();
            av.map(|x| bin_eval(kind, x, y))
        } else {
            return Err(Error::shape(op_name(kind), "operands", av.shape(), bv.shape()));
        };
        Ok(self.push(value, Op::Binary(a, b, kind), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    fn per_channel(&mut self, x: Var, c: Var, kind: PerChannel) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        let channels = *xv.shape().first().ok_or_else(|| Error::shape("per_channel", "rank", ">=1", 0))?;
        if cv.numel() != channels {
            return Err(Error::shape("per_channel", "channel axis", channels, cv.numel()));
        }
        let inner = xv.numel() / channels.max(1);
        let mut out = xv.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate().take(channels) {
            let k = cv.data()[ch];
            match kind {
                PerChannel::Add => chunk.iter_mut().for_each(|v| *v += k),
                PerChannel::Mul => chunk.iter_mut().for_each(|v| *v *= k),
                PerChannel::Prelu => chunk.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v *= k
                    }
                }),
            }
        }
        Ok(self.push(out, Op::PerChannel(x, c, kind), &[x, c]))
    }

    /// `x[c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.per_channel(x, bias, PerChannel::Add)
    }

    /// `x[c, ...] * gain[c]`.
    pub fn mul_channel(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.per_channel(x, gain, PerChannel::Mul)
    }

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.per_channel(x, slope, PerChannel::Prelu)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Batched product `[B, M, K] x [B, K, N]`; rank-2 operands are treated as `B = 1`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = batched_matmul(self.value(a), self.value(b), false, false)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or_else(|| Error::shape("softmax", "rank", ">=1", 0))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// `sqrt(re^2 + im^2)`; the gradient at the origin is zero.
    pub fn complex_abs(&mut self, re: Var, im: Var) -> Result<Var> {
        let value = self.value(re).zip_map(self.value(im), f64::hypot)?;
        Ok(self.push(value, Op::ComplexAbs(re, im), &[re, im]))
    }

    /// Convolution of `x: [C_in, F, T]` with `w: [C_out, C_in/groups, kf, kt]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: &Conv2dSpec) -> Result<Var> {
        let value = conv::forward(self.value(x), self.value(w), spec)?;
        Ok(self.push(value, Op::Conv2d { x, w, spec: spec.clone() }, &[x, w]))
    }

    /// Transposed convolution: the input-gradient of [`Tape::conv2d`] applied forwards.
    /// `w: [C_in, C_out/groups, kf, kt]`; output is untrimmed.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: &Conv2dSpec) -> Result<Var> {
        let out_shape = conv::transpose_output_shape(self.shape(x), self.shape(w), spec)?;
        let value = conv::input_grad(self.value(x), self.value(w), &out_shape, spec)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, spec: spec.clone() }, &[x, w]))
    }

    /// Weight normalization: `g[o] * v[o] / ||v[o]||` over the leading axis.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (vv, gv) = (self.value(v), self.value(g));
        let rows = vv.dim(0);
        if gv.numel() != rows {
            return Err(Error::shape("weight_norm", "output-channel axis", rows, gv.numel()));
        }
        let inner = vv.numel() / rows;
        let mut out = vv.clone();
        for (o, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let k = gv.data()[o] / n;
            chunk.iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.push(out, Op::WeightNorm { v, g }, &[v, g]))
    }

    /// Cumulative layer norm on `[C, F, T]`: frame `t` of channel `c` is
    /// normalized with the mean and variance of that channel over all bins of
    /// frames `0..=t`.
    pub fn cum_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 {
            return Err(Error::shape("cum_norm", "rank", 3, xv.ndim()));
        }
        let (c, f, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Tensor::zeros([c, f, t]);
        for ch in 0..c {
            let (mu, r) = cum_stats(xv.data(), ch, f, t, eps);
            for fi in 0..f {
                let base = (ch * f + fi) * t;
                for ti in 0..t {
                    out.data_mut()[base + ti] = (xv.data()[base + ti] - mu[ti]) * r[ti];
                }
            }
        }
        Ok(self.push(out, Op::CumNorm { x, eps }, &[x]))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&values)?;
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs))
    }

    /// Gradients of the scalar `loss` with respect to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss is detached from every differentiable leaf".into()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, u) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for ((gi, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                    *gi *= u.deriv(xi, yi);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let broadcast = av.shape() != bv.shape();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(if broadcast { av.shape().to_vec() } else { bv.shape().to_vec() });
                let bval = |i: usize| if broadcast { bv.data()[0] } else { bv.data()[i] };
                for i in 0..g.numel() {
                    let (x, yb, gi) = (av.data()[i], bval(i), g.data()[i]);
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (yb, x),
                        Binary::Div => (1.0 / yb, -x / (yb * yb)),
                    };
                    ga.data_mut()[i] = gi * da;
                    gb.data_mut()[i] = gi * db;
                }
                if self.requires_grad(*b) {
                    let gb = if broadcast {
                        Tensor::full(bv.shape().to_vec(), gb.sum())
                    } else {
                        gb
                    };
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PerChannel(x, c, kind) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let channels = cv.numel();
                let inner = xv.numel() / channels.max(1);
                let mut gx = g.clone();
                let mut gc = Tensor::zeros(cv.shape().to_vec());
                for ch in 0..channels {
                    let k = cv.data()[ch];
                    let range = ch * inner..(ch + 1) * inner;
                    let (xs, gs) = (&xv.data()[range.clone()], &g.data()[range.clone()]);
                    let gxs = &mut gx.data_mut()[range];
                    let mut acc = 0.0;
                    match kind {
                        PerChannel::Add => acc = gs.iter().sum(),
                        PerChannel::Mul => {
                            for ((gx, &gi), &xi) in gxs.iter_mut().zip(gs).zip(xs) {
                                *gx = gi * k;
                                acc += gi * xi;
                            }
                        }
                        PerChannel::Prelu => {
                            for ((gx, &gi), &xi) in gxs.iter_mut().zip(gs).zip(xs) {
                                if xi < 0.0 {
                                    *gx = gi * k;
                                    acc += gi * xi;
                                }
                            }
                        }
                    }
                    gc.data_mut()[ch] = acc;
                }
                self.accumulate(grads, *c, gc);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = self.value(*x).numel().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(shape, g.item() / n));
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv)?);
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (n, len) = (xs[*axis], g.shape()[*axis]);
                let mut gx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        self.accumulate(grads, x, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = batched_matmul(g, bv, false, true)?.reshape(av.shape().to_vec())?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = batched_matmul(av, g, true, false)?.reshape(bv.shape().to_vec())?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(n.max(1)).zip(y.data().chunks(n.max(1))) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ComplexAbs(re, im) => {
                let (rv, iv) = (self.value(*re), self.value(*im));
                let mut gr = g.clone();
                let mut gi = g.clone();
                for i in 0..g.numel() {
                    let m = y.data()[i];
                    let (dr, di) = if m > 0.0 {
                        (rv.data()[i] / m, iv.data()[i] / m)
                    } else {
                        (0.0, 0.0)
                    };
                    gr.data_mut()[i] *= dr;
                    gi.data_mut()[i] *= di;
                }
                self.accumulate(grads, *re, gr);
                self.accumulate(grads, *im, gi);
            }
            Op::Conv2d { x, w, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, conv::input_grad(g, wv, xv.shape(), spec)?);
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, conv::weight_grad(xv, g, wv.shape(), spec)?);
                }
            }
            Op::ConvTranspose2d { x, w, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, conv::forward(g, wv, spec)?);
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, conv::weight_grad(g, xv, wv.shape(), spec)?);
                }
            }
            Op::WeightNorm { v, g: gain } => {
                let (vv, gv) = (self.value(*v), self.value(*gain));
                let rows = vv.dim(0);
                let inner = vv.numel() / rows;
                let mut dv = Tensor::zeros(vv.shape().to_vec());
                let mut dg = Tensor::zeros(gv.shape().to_vec());
                for o in 0..rows {
                    let range = o * inner..(o + 1) * inner;
                    let vs = &vv.data()[range.clone()];
                    let gs = &g.data()[range.clone()];
                    let n = vs.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let proj: f64 = gs.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>() / n;
                    dg.data_mut()[o] = proj;
                    let k = gv.data()[o] / n;
                    for ((d, &gi), &vi) in dv.data_mut()[range].iter_mut().zip(gs).zip(vs) {
                        *d = k * (gi - vi / n * proj);
                    }
                }
                self.accumulate(grads, *v, dv);
                self.accumulate(grads, *gain, dg);
            }
            Op::CumNorm { x, eps } => {
                let xv = self.value(*x);
                let (c, f, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let mut gx = Tensor::zeros([c, f, t]);
                for ch in 0..c {
                    let (mu, r) = cum_stats(xv.data(), ch, f, t, *eps);
                    let mut a = vec![0.0; t];
                    let mut b = vec![0.0; t];
                    for ti in 0..t {
                        let (mut gs, mut gxm) = (0.0, 0.0);
                        for fi in 0..f {
                            let idx = (ch * f + fi) * t + ti;
                            gs += g.data()[idx];
                            gxm += g.data()[idx] * (xv.data()[idx] - mu[ti]);
                        }
                        let dv = -0.5 * r[ti].powi(3) * gxm;
                        let dmu = -r[ti] * gs - 2.0 * mu[ti] * dv;
                        let n = (f * (ti + 1)) as f64;
                        a[ti] = dmu / n;
                        b[ti] = 2.0 * dv / n;
                    }
                    for ti in (0..t.saturating_sub(1)).rev() {
                        a[ti] += a[ti + 1];
                        b[ti] += b[ti + 1];
                    }
                    for fi in 0..f {
                        let base = (ch * f + fi) * t;
                        for ti in 0..t {
                            let idx = base + ti;
                            gx.data_mut()[idx] = g.data()[idx] * r[ti] + a[ti] + b[ti] * xv.data()[idx];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&values, y, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        self.accumulate(grads, v, gv);
                    }
                }
            }
        }
        Ok(())
    }
}

fn bin_eval(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

fn op_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

/// Running mean and inverse standard deviation per frame for one channel.
fn cum_stats(x: &[f64], ch: usize, f: usize, t: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; t];
    let mut r = vec![0.0; t];
    let (mut s1, mut s2) = (0.0, 0.0);
    for ti in 0..t {
        for fi in 0..f {
            let v = x[(ch * f + fi) * t + ti];
            s1 += v;
            s2 += v * v;
        }
        let n = (f * (ti + 1)) as f64;
        let m = s1 / n;
        mu[ti] = m;
        r[ti] = 1.0 / (s2 / n - m * m + eps).sqrt();
    }
    (mu, r)
}

fn as_batched(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [m, n] => Ok([1, *m, *n]),
        [b, m, n] => Ok([*b, *m, *n]),
        _ => Err(Error::shape("matmul", "rank", "2 or 3", shape.len())),
    }
}

/// `op(A) · op(B)` per batch, where `op` optionally transposes the last two axes.
fn batched_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let [ba, ar, ac] = as_batched(a.shape())?;
    let [bb, br, bc] = as_batched(b.shape())?;
    if ba != bb {
        return Err(Error::shape("matmul", "batch axis", ba, bb));
    }
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape("matmul", "inner dimension", k, k2));
    }
    let mut out = vec![0.0; ba * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..ba {
        let (asz, bsz) = (ar * ac, br * bc);
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        conv::gemm(m, k, n, &ad[bi * asz..(bi + 1) * asz], ta, &bd[bi * bsz..(bi + 1) * bsz], tb, c, 0.0);
    }
    let shape = if a.ndim() == 2 && b.ndim() == 2 { vec![m, n] } else { vec![ba, m, n] };
    Tensor::new(shape, out)
}
