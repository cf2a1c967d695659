use super::linalg::gemm;
use super::tensor::{strides_of, Tensor};
use super::AutodiffError;

/// Slope of the negative half of leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Added to the batch variance before normalizing.
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    LeakyRelu,
    Sigmoid,
    LogSigmoid,
    Exp,
    Log,
    Square,
    Tanh,
    Cos,
    Sin,
    Affine { scale: f64, shift: f64 },
    Clamp { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Sum(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    MaxAxis {
        input: Var,
        /// Flat input index chosen for every output element.
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        input: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GruCell {
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        /// Reset gate, update gate, candidate and the hidden part of the
        /// candidate pre-activation, each of length `hidden`.
        r: Vec<f64>,
        z: Vec<f64>,
        n: Vec<f64>,
        gh_n: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<f64>,
}

/// Append-only record of a computation. Node order is creation order, which
/// is also a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient with respect to `v`, zeros when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut counter = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let input = self.value(x);
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::LeakyRelu => Box::new(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::LogSigmoid => Box::new(log_sigmoid),
            Unary::Exp => Box::new(f64::exp),
            Unary::Log => Box::new(f64::ln),
            Unary::Square => Box::new(|v| v * v),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Cos => Box::new(f64::cos),
            Unary::Sin => Box::new(f64::sin),
            Unary::Affine { scale, shift } => Box::new(move |v| scale * v + shift),
            Unary::Clamp { lo, hi } => Box::new(move |v| v.clamp(lo, hi)),
        };
        let value = input.map(f);
        let rg = self.requires_grad(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(Unary::LeakyRelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// `log(sigmoid(x))` evaluated without underflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::LogSigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(Unary::Affine { scale, shift }, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp { lo, hi }, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(op_name, ta.shape(), tb.shape()))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut data = vec![0.0; n];
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Binary(kind, a, b),
            rg,
        ))
    }

    /// Element-wise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(invalid("sum_axis", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis { input: x, axis },
            rg,
        ))
    }

    /// Maximum along `axis`, removing it. Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if axis >= t.ndim() || t.shape()[axis] == 0 {
            return Err(invalid("max_axis", format!("axis {axis} for shape {:?}", t.shape())));
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * extent * inner + i;
                for k in 1..extent {
                    let idx = (o * extent + k) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaxAxis { input: x, argmax },
            rg,
        ))
    }

    /// Minimum along `axis`, as `-max(-x)`.
    pub fn min_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let neg = self.neg(x);
        let m = self.max_axis(neg, axis)?;
        Ok(self.neg(m))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let nd = t.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} for shape {:?}", t.shape())));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        let in_strides = strides_of(t.shape());
        let permuted: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zeros = vec![0; nd];
        let d = t.data();
        let mut out = vec![0.0; t.len()];
        for_each_broadcast(&out_shape, &permuted, &zeros, |o, i, _| out[o] = d[i]);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                input: x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if axis >= t.ndim() || start >= end || end > t.shape()[axis] {
            return Err(invalid(
                "slice",
                format!("{start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, extent, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * extent + start) * inner..(o * extent + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Matrix product of `(n, k)` and `(k, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), (k, 1), tb.data(), (m, 1), 0.0, &mut out, (m, 1));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// Valid (unpadded) stride-1 convolution of `(batch, c_in, len)` with
    /// weights `(c_out, c_in, kernel)` and optional bias `(c_out)`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        let (tx, tw) = (self.value(x), self.value(weight));
        if tx.ndim() != 3 || tw.ndim() != 3 || tx.shape()[1] != tw.shape()[1] || tw.shape()[2] > tx.shape()[2] {
            return Err(mismatch("conv1d", tx.shape(), tw.shape()));
        }
        let (batch, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kernel) = (tw.shape()[0], tw.shape()[2]);
        let out_len = len - kernel + 1;
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(mismatch("conv1d", tw.shape(), tb.shape()));
            }
        }
        let mut out = vec![0.0; batch * c_out * out_len];
        let (xd, wd) = (tx.data(), tw.data());
        for bi in 0..batch {
            let xb = &xd[bi * c_in * len..(bi + 1) * c_in * len];
            let ob = &mut out[bi * c_out * out_len..(bi + 1) * c_out * out_len];
            for j in 0..kernel {
                // tap j: (c_out, c_in) slice of the weights times the input shifted by j
                gemm(
                    c_out,
                    c_in,
                    out_len,
                    &wd[j..],
                    (c_in * kernel, kernel),
                    &xb[j..],
                    (len, 1),
                    1.0,
                    ob,
                    (out_len, 1),
                );
            }
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (c, row) in ob.chunks_mut(out_len).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[c]);
                }
            }
        }
        let rg = self.requires_grad(x)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            Tensor::from_parts(vec![batch, c_out, out_len], out),
            Op::Conv1d {
                input: x,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Max pooling with window 2 and stride 2 over the last axis of
    /// `(batch, channels, len)`; a trailing odd element is dropped.
    pub fn maxpool1d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.ndim() != 3 || t.shape()[2] < 2 {
            return Err(invalid("maxpool1d", format!("input shape {:?}", t.shape())));
        }
        let (rows, len) = (t.shape()[0] * t.shape()[1], t.shape()[2]);
        let out_len = len / 2;
        let d = t.data();
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for k in 0..out_len {
                let i = r * len + 2 * k;
                let best = if d[i + 1] > d[i] { i + 1 } else { i };
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let shape = vec![t.shape()[0], t.shape()[1], out_len];
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaxPool1d { input: x, argmax },
            rg,
        ))
    }

    fn check_batchnorm(&self, x: Var, gamma: Var, beta: Var) -> Result<usize, AutodiffError> {
        let t = self.value(x);
        if t.ndim() != 3 {
            return Err(invalid("batchnorm1d", format!("input shape {:?}", t.shape())));
        }
        let c = t.shape()[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("batchnorm1d", t.shape(), self.shape(p)));
            }
        }
        Ok(c)
    }

    fn push_batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Var {
        let t = self.value(x);
        let (batch, c, len) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = t.data();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * len;
                for l in 0..len {
                    let h = (d[base + l] - mean[ch]) * inv_std[ch];
                    xhat[base + l] = h;
                    out[base + l] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Training-mode batch normalization of `(batch, channels, len)`, with
    /// statistics taken over the batch and length axes of each channel.
    pub fn batchnorm1d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats), AutodiffError> {
        let c = self.check_batchnorm(x, gamma, beta)?;
        let t = self.value(x);
        let (batch, len) = (t.shape()[0], t.shape()[2]);
        let count = (batch * len) as f64;
        if batch * len == 0 {
            return Err(invalid("batchnorm1d", "empty batch"));
        }
        let d = t.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let values = (0..batch).flat_map(|bi| d[(bi * c + ch) * len..(bi * c + ch + 1) * len].iter());
            let m = values.clone().sum::<f64>() / count;
            mean[ch] = m;
            var[ch] = values.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let unbiased = if count > 1.0 {
            var.iter().map(|v| v * count / (count - 1.0)).collect()
        } else {
            var.clone()
        };
        let out = self.push_batchnorm(x, gamma, beta, &mean, inv_std, true);
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization using frozen statistics; an affine
    /// map of the input.
    pub fn batchnorm1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var, AutodiffError> {
        let c = self.check_batchnorm(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch("batchnorm1d", self.shape(x), &[running_mean.len()]));
        }
        let inv_std = running_var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        Ok(self.push_batchnorm(x, gamma, beta, running_mean, inv_std, false))
    }

    /// One step of a gated recurrent unit with gate order (reset, update,
    /// candidate):
    ///
    /// ```text
    /// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
    /// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
    /// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
    /// h' = (1 − z) ⊙ n + z ⊙ h
    /// ```
    #[allow(clippy::too_many_arguments)]
    pub fn gru_cell(
        &mut self,
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var, AutodiffError> {
        let (tx, th) = (self.value(x), self.value(h));
        if tx.ndim() != 1 || th.ndim() != 1 {
            return Err(mismatch("gru_cell", tx.shape(), th.shape()));
        }
        let (ni, nh) = (tx.len(), th.len());
        let checks = [
            (w_ih, vec![3 * nh, ni]),
            (w_hh, vec![3 * nh, nh]),
            (b_ih, vec![3 * nh]),
            (b_hh, vec![3 * nh]),
        ];
        for (v, want) in &checks {
            if self.shape(*v) != want.as_slice() {
                return Err(mismatch("gru_cell", want, self.shape(*v)));
            }
        }
        let mut gi = self.value(b_ih).to_vec();
        let mut gh = self.value(b_hh).to_vec();
        gemm(3 * nh, ni, 1, self.value(w_ih).data(), (ni, 1), tx.data(), (1, 1), 1.0, &mut gi, (1, 1));
        gemm(3 * nh, nh, 1, self.value(w_hh).data(), (nh, 1), th.data(), (1, 1), 1.0, &mut gh, (1, 1));
        let hd = th.data();
        let mut r = vec![0.0; nh];
        let mut z = vec![0.0; nh];
        let mut n = vec![0.0; nh];
        let mut out = vec![0.0; nh];
        for j in 0..nh {
            r[j] = sigmoid(gi[j] + gh[j]);
            z[j] = sigmoid(gi[nh + j] + gh[nh + j]);
            n[j] = (gi[2 * nh + j] + r[j] * gh[2 * nh + j]).tanh();
            out[j] = (1.0 - z[j]) * n[j] + z[j] * hd[j];
        }
        let gh_n = gh[2 * nh..].to_vec();
        let rg = [x, h, w_ih, w_hh, b_ih, b_hh]
            .iter()
            .any(|&v| self.requires_grad(v));
        Ok(self.push(
            Tensor::from_parts(vec![nh], out),
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                r,
                z,
                n,
                gh_n,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_seeded(&[(loss, Tensor::full(t.shape().to_vec(), 1.0))])
    }

    /// Reverse sweep with explicit upstream gradients for one or more
    /// outputs (a vector-Jacobian product).
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, AutodiffError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.shape(*v) {
                return Err(mismatch("backward", self.shape(*v), seed.shape()));
            }
            accumulate(&mut grads, *v, seed.to_vec());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let dx: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let d = match *kind {
                            Unary::LeakyRelu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    LEAKY_SLOPE
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::LogSigmoid => 1.0 - sigmoid(xv[i]),
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / xv[i],
                            Unary::Square => 2.0 * xv[i],
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Cos => -xv[i].sin(),
                            Unary::Sin => xv[i].cos(),
                            Unary::Affine { scale, .. } => scale,
                            Unary::Clamp { lo, hi } => {
                                if xv[i] >= lo && xv[i] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[i] * d
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out = node.value.shape();
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let mut ga = if wa { vec![0.0; ta.len()] } else { Vec::new() };
                let mut gb = if wb { vec![0.0; tb.len()] } else { Vec::new() };
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                let (da, db) = (ta.data(), tb.data());
                for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
                    let (ca, cb) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (db[ib], da[ia]),
                    };
                    if wa {
                        ga[ia] += g[o] * ca;
                    }
                    if wb {
                        gb[ib] += g[o] * cb;
                    }
                });
                if wa {
                    accumulate(grads, *a, ga);
                }
                if wb {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { input, axis } => {
                let t = self.value(*input);
                let (outer, extent, inner) = split_axis(t.shape(), *axis);
                let mut dx = vec![0.0; t.len()];
                for o in 0..outer {
                    for k in 0..extent {
                        let base = (o * extent + k) * inner;
                        dx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::MaxAxis { input, argmax } | Op::MaxPool1d { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                accumulate(grads, *input, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute { input, axes } => {
                let t = self.value(*input);
                let in_strides = strides_of(t.shape());
                let permuted: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
                let zeros = vec![0; axes.len()];
                let mut dx = vec![0.0; t.len()];
                for_each_broadcast(node.value.shape(), &permuted, &zeros, |o, i, _| dx[i] = g[o]);
                accumulate(grads, *input, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let extent = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(outer * extent * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[s..s + extent * inner]);
                        }
                        accumulate(grads, v, dx);
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, axis, start } => {
                let t = self.value(*input);
                let (outer, extent, inner) = split_axis(t.shape(), *axis);
                let width = node.value.shape()[*axis];
                let mut dx = vec![0.0; t.len()];
                for o in 0..outer {
                    let d = (o * extent + start) * inner;
                    dx[d..d + width * inner].copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                accumulate(grads, *input, dx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g, (m, 1), tb.data(), (1, m), 0.0, &mut da, (k, 1));
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, ta.data(), (1, k), g, (m, 1), 0.0, &mut db, (m, 1));
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
            } => self.conv1d_backward(*input, *weight, *bias, g, grads),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let t = self.value(*input);
                let (batch, c, len) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat_sum = vec![0.0; c];
                let mut dxhat_xhat = vec![0.0; c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * len;
                        for l in 0..len {
                            let (gy, h) = (g[base + l], xhat[base + l]);
                            dgamma[ch] += gy * h;
                            dbeta[ch] += gy;
                            dxhat_sum[ch] += gy * gam[ch];
                            dxhat_xhat[ch] += gy * gam[ch] * h;
                        }
                    }
                }
                if self.wants(*input) {
                    let count = (batch * len) as f64;
                    let mut dx = vec![0.0; t.len()];
                    for bi in 0..batch {
                        for ch in 0..c {
                            let base = (bi * c + ch) * len;
                            for l in 0..len {
                                let dxh = g[base + l] * gam[ch];
                                dx[base + l] = if *train {
                                    inv_std[ch] / count
                                        * (count * dxh - dxhat_sum[ch] - xhat[base + l] * dxhat_xhat[ch])
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                r,
                z,
                n,
                gh_n,
            } => {
                let (xd, hd) = (self.value(*x).data(), self.value(*h).data());
                let (ni, nh) = (xd.len(), hd.len());
                let mut dgi = vec![0.0; 3 * nh];
                let mut dgh = vec![0.0; 3 * nh];
                let mut dh = vec![0.0; nh];
                for j in 0..nh {
                    let dz = g[j] * (hd[j] - n[j]);
                    let dn = g[j] * (1.0 - z[j]);
                    dh[j] = g[j] * z[j];
                    let dan = dn * (1.0 - n[j] * n[j]);
                    let dr = dan * gh_n[j];
                    let dar = dr * r[j] * (1.0 - r[j]);
                    let daz = dz * z[j] * (1.0 - z[j]);
                    dgi[j] = dar;
                    dgi[nh + j] = daz;
                    dgi[2 * nh + j] = dan;
                    dgh[j] = dar;
                    dgh[nh + j] = daz;
                    dgh[2 * nh + j] = dan * r[j];
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; ni];
                    gemm(ni, 3 * nh, 1, self.value(*w_ih).data(), (1, ni), &dgi, (1, 1), 0.0, &mut dx, (1, 1));
                    accumulate(grads, *x, dx);
                }
                if self.wants(*h) {
                    gemm(nh, 3 * nh, 1, self.value(*w_hh).data(), (1, nh), &dgh, (1, 1), 1.0, &mut dh, (1, 1));
                    accumulate(grads, *h, dh);
                }
                if self.wants(*w_ih) {
                    let mut dw = vec![0.0; 3 * nh * ni];
                    gemm(3 * nh, 1, ni, &dgi, (1, 1), xd, (1, 1), 0.0, &mut dw, (ni, 1));
                    accumulate(grads, *w_ih, dw);
                }
                if self.wants(*w_hh) {
                    let mut dw = vec![0.0; 3 * nh * nh];
                    gemm(3 * nh, 1, nh, &dgh, (1, 1), hd, (1, 1), 0.0, &mut dw, (nh, 1));
                    accumulate(grads, *w_hh, dw);
                }
                if self.wants(*b_ih) {
                    accumulate(grads, *b_ih, dgi);
                }
                if self.wants(*b_hh) {
                    accumulate(grads, *b_hh, dgh);
                }
            }
        }
    }

    fn conv1d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tx, tw) = (self.value(input), self.value(weight));
        let (batch, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, kernel) = (tw.shape()[0], tw.shape()[2]);
        let out_len = len - kernel + 1;
        let (xd, wd) = (tx.data(), tw.data());
        let want_x = self.wants(input);
        let want_w = self.wants(weight);
        let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
        for bi in 0..batch {
            let gb = &g[bi * c_out * out_len..(bi + 1) * c_out * out_len];
            let xb = &xd[bi * c_in * len..(bi + 1) * c_in * len];
            for j in 0..kernel {
                if want_w {
                    gemm(
                        c_out,
                        out_len,
                        c_in,
                        gb,
                        (out_len, 1),
                        &xb[j..],
                        (1, len),
                        1.0,
                        &mut dw[j..],
                        (c_in * kernel, kernel),
                    );
                }
                if want_x {
                    let dxb = &mut dx[bi * c_in * len..(bi + 1) * c_in * len];
                    gemm(
                        c_in,
                        c_out,
                        out_len,
                        &wd[j..],
                        (kernel, c_in * kernel),
                        gb,
                        (out_len, 1),
                        1.0,
                        &mut dxb[j..],
                        (len, 1),
                    );
                }
            }
        }
        if want_x {
            accumulate(grads, input, dx);
        }
        if want_w {
            accumulate(grads, weight, dw);
        }
        if let Some(b) = bias.filter(|&b| self.wants(b)) {
            let mut db = vec![0.0; c_out];
            for row in g.chunks(out_len).enumerate() {
                db[row.0 % c_out] += row.1.iter().sum::<f64>();
            }
            accumulate(grads, b, db);
        }
    }
}
