//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every forward op appends a node holding its output value and enough
//! information to push gradients back to its inputs. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid
//! topological order because inputs always precede their consumers.

use std::collections::BTreeMap;

use super::dense::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Abs,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Constant,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Unary(Unary, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with supplied running statistics.
    Eval { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel mean and biased variance of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradient tape. Single-threaded; build one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a consumed tape.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf or parameter variable.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let var = *self.params.get(&id)?;
        self.leaves.get_mut(&var)
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|v| self.leaves.get(v))
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every parameter gradient so the global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_param_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.param_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            let vars: Vec<Var> = self.params.values().copied().collect();
            for v in vars {
                if let Some(g) = self.leaves.get_mut(&v) {
                    g.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
            }
        }
        norm
    }
}

/// `(outer, len, inner)` strides for iterating along `axis` of `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let npos = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let npos = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Param => true,
            Op::Constant => false,
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::Bmm(a, b) | Op::AddRow(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Scale(a, _)
            | Op::TransposeLast2(a)
            | Op::Reshape(a)
            | Op::Unary(_, a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Narrow { x: a, .. }
            | Op::Softmax { x: a, .. }
            | Op::MeanAxis { x: a, .. } => self.requires_grad(*a),
            Op::Concat { xs, .. } => xs.iter().any(|&x| self.requires_grad(x)),
            Op::Conv2d { x, w, b, .. } => {
                self.requires_grad(*x) || self.requires_grad(*w) || b.is_some_and(|b| self.requires_grad(b))
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                self.requires_grad(*x) || self.requires_grad(*gamma) || self.requires_grad(*beta)
            }
            Op::Embedding { table, .. } => self.requires_grad(*table),
            Op::CrossEntropy { logits, .. } => self.requires_grad(*logits),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    /// Parameter `id` of `store`; registered at most once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Parameters registered so far.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.rank() == 0 {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.rank() == 0 {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        self.push(name, out, Op::Binary(kind, a, b))
    }

    /// Elementwise sum; one operand may be rank-0.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    /// `x[..., m] + bias[m]` broadcast over all leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let m = tb.numel();
        if tb.rank() != 1 || tx.rank() == 0 || *tx.shape().last().unwrap() != m {
            return Err(Error::shape(
                "add_row",
                format!("x {:?}, bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(x, bias))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(&[bs, m, n], out)?;
        self.push("bmm", out, Op::Bmm(a, b))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", ta.rank())));
        }
        let r = ta.rank();
        let (rows, cols) = (ta.shape()[r - 2], ta.shape()[r - 1]);
        let mut shape = ta.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let mut out = vec![0.0; ta.numel()];
        for (blk, src) in ta.data().chunks_exact(rows * cols).enumerate() {
            let dst = &mut out[blk * rows * cols..(blk + 1) * rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push("transpose", out, Op::TransposeLast2(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let out = ta
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {:?}", ta.shape(), shape)))?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(tx.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        self.push("narrow", out, Op::Narrow { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {ref_shape:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {ref_shape:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&ref_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat { xs: xs.to_vec(), axis })
    }

    fn unary(&mut self, kind: Unary, name: &'static str, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| match kind {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Abs => x.abs(),
        });
        self.push(name, out, Op::Unary(kind, a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, "relu", a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, "sigmoid", a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, "tanh", a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, "abs", a)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", tx.shape())));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (d[idx(a)] - max).exp();
                    d[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    d[idx(a)] /= z;
                }
            }
        }
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    /// Sum of all entries, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", out, Op::Mean(a))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {:?}", tx.shape())));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &tx.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        self.push("mean_axis", out, Op::MeanAxis { x, axis })
    }

    /// 2-D convolution: `x[N, C, H, W]`, `w[O, C, k, k]`, optional `b[O]`.
    /// Output extents are `floor((in + 2 pad - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let bad = |detail: String| Error::shape("conv2d", detail);
        if tx.rank() != 4 || tw.rank() != 4 || tw.shape()[2] != tw.shape()[3] || stride == 0 {
            return Err(bad(format!(
                "input {:?}, kernel {:?}, stride {stride}",
                tx.shape(),
                tw.shape()
            )));
        }
        let [n, c, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [o, ci, k, _] = [tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]];
        if ci != c {
            return Err(bad(format!("input channels {c} but kernel expects {ci}")));
        }
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(bad(format!("kernel {k} larger than padded input {h}x{wd}"))),
        };
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [o] {
                return Err(bad(format!("bias {:?} for {o} output channels", tb.shape())));
            }
        }
        let npos = oh * ow;
        let ckk = c * k * k;
        let mut cols = vec![0.0; ckk * npos];
        let mut out = vec![0.0; n * o * npos];
        for i in 0..n {
            let img = &tx.data()[i * c * h * wd..(i + 1) * c * h * wd];
            im2col(img, c, h, wd, k, stride, pad, oh, ow, &mut cols);
            let dst = &mut out[i * o * npos..(i + 1) * o * npos];
            if let Some(b) = b {
                for (oc, chunk) in dst.chunks_exact_mut(npos).enumerate() {
                    chunk.fill(self.nodes[b.0].value.data()[oc]);
                }
            }
            gemm_acc(tw.data(), &cols, dst, o, ckk, npos);
        }
        let out = Tensor::new(&[n, o, oh, ow], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Batch normalization over axis 1 of `x[N, C, ...]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?} needs a batch and channel axis", tx.shape()),
            ));
        }
        let c = tx.shape()[1];
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?}, beta {:?} for {c} channels", tg.shape(), tb.shape()),
            ));
        }
        let (outer, _, inner) = axis_split(tx.shape(), 1);
        let m = (outer * inner) as f64;
        let each = |ch: usize, f: &mut dyn FnMut(usize)| {
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    f(i);
                }
            }
        };
        let (training, mean, var, eps) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    each(ch, &mut |i| s += tx.data()[i]);
                    let mu = s / m;
                    let mut sq = 0.0;
                    each(ch, &mut |i| sq += (tx.data()[i] - mu).powi(2));
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (true, mean, var, eps)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (false, mean.to_vec(), var.to_vec(), eps)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for ch in 0..c {
            let (g, bt) = (tg.data()[ch], tb.data()[ch]);
            each(ch, &mut |i| {
                xhat[i] = (tx.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = g * xhat[i] + bt;
            });
        }
        let out = Tensor::new(tx.shape(), out)?;
        let stats = training.then_some(BatchStats { mean, var });
        let v = self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        )?;
        Ok((v, stats))
    }

    /// Rows of `table[V, E]` selected by `ids`, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || ids.is_empty() {
            return Err(Error::shape(
                "embedding",
                format!("table {:?} with {} ids", tt.shape(), ids.len()),
            ));
        }
        let (v, e) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::shape(
                "embedding",
                format!("token id {bad} out of range for vocabulary of {v}"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&tt.data()[id * e..(id + 1) * e]);
        }
        let out = Tensor::new(&[ids.len(), e], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Summed softmax cross-entropy of `logits[N, V]` against `targets`,
    /// counting only rows where `mask` is true. Rank-0 result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || targets.len() != tl.shape()[0] || mask.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} mask entries",
                    tl.shape(),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let (n, v) = (tl.shape()[0], tl.shape()[1]);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {} out of range for {v} classes", targets[r]),
                ));
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Tape("loss does not depend on any tracked value".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match self.nodes[idx].op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                _ => self.backprop_node(idx, &g, &mut grads)?,
            }
        }

        let mut leaves = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Param) {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.insert(Var(idx), g);
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param | Op::Constant => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb): (Tensor, Tensor) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|x| -x)),
                    Binary::Mul => {
                        let other = |t: &Tensor, i: usize| {
                            if t.rank() == 0 && g.rank() != 0 {
                                t.item()
                            } else {
                                t.data()[i]
                            }
                        };
                        let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * other(tb, i));
                        let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * other(ta, i));
                        (ga, gb)
                    }
                };
                let reduce = |t: &Tensor, grad: Tensor| {
                    if t.shape() == grad.shape() {
                        grad
                    } else {
                        Tensor::scalar(grad.sum())
                    }
                };
                acc(*a, reduce(ta, ga));
                acc(*b, reduce(tb, gb));
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::AddRow(x, b) => {
                let m = self.value(*b).numel();
                let mut gb = vec![0.0; m];
                for row in g.data().chunks_exact(m) {
                    for (d, &s) in gb.iter_mut().zip(row) {
                        *d += s;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(&[m], gb)?);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), tb.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(&[m, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(ta.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    gemm_nt_acc(
                        gi,
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    gemm_tn_acc(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        gi,
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(*a, Tensor::new(ta.shape(), ga)?);
                acc(*b, Tensor::new(tb.shape(), gb)?);
            }
            Op::TransposeLast2(a) => {
                let r = g.rank();
                let (rows, cols) = (g.shape()[r - 2], g.shape()[r - 1]);
                let mut data = vec![0.0; g.numel()];
                for (blk, src) in g.data().chunks_exact(rows * cols).enumerate() {
                    let dst = &mut data[blk * rows * cols..(blk + 1) * rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dst[j * rows + i] = src[i * cols + j];
                        }
                    }
                }
                acc(*a, Tensor::new(self.shape(*a), data)?);
            }
            Op::Reshape(a) => acc(*a, g.reshaped(self.shape(*a))?),
            Op::Narrow { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, full, inner) = axis_split(src_shape, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(src_shape, data)?);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let shape = self.shape(x);
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(self.value(x).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    acc(x, Tensor::new(shape, data)?);
                }
            }
            Op::Unary(kind, a) => {
                let ta = self.value(*a);
                let d = Tensor::from_fn(g.shape(), |i| {
                    let (x, y) = (ta.data()[i], out.data()[i]);
                    let local = match kind {
                        Unary::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Abs => {
                            if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    g.data()[i] * local
                });
                acc(*a, d);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut data = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g.data()[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            data[idx(a)] = y[idx(a)] * (g.data()[idx(a)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(out.shape(), data)?);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut data = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut data[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s / len as f64;
                        }
                    }
                }
                acc(*x, Tensor::new(shape, data)?);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let [n, c, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let (o, k) = (tw.shape()[0], tw.shape()[2]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let (npos, ckk) = (oh * ow, c * k * k);
                let need_x = self.nodes[x.0].requires_grad;
                let mut cols = vec![0.0; ckk * npos];
                let mut dcols = vec![0.0; ckk * npos];
                let mut gw = vec![0.0; tw.numel()];
                let mut gx = vec![0.0; if need_x { tx.numel() } else { 0 }];
                let mut gb = vec![0.0; o];
                for i in 0..n {
                    let gi = &g.data()[i * o * npos..(i + 1) * o * npos];
                    for (oc, chunk) in gi.chunks_exact(npos).enumerate() {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                    let img = &tx.data()[i * c * h * wd..(i + 1) * c * h * wd];
                    im2col(img, c, h, wd, k, *stride, *pad, oh, ow, &mut cols);
                    gemm_nt_acc(gi, &cols, &mut gw, o, npos, ckk);
                    if need_x {
                        dcols.fill(0.0);
                        gemm_tn_acc(tw.data(), gi, &mut dcols, o, ckk, npos);
                        col2im_acc(
                            &dcols,
                            c,
                            h,
                            wd,
                            k,
                            *stride,
                            *pad,
                            oh,
                            ow,
                            &mut gx[i * c * h * wd..(i + 1) * c * h * wd],
                        );
                    }
                }
                if need_x {
                    acc(*x, Tensor::new(tx.shape(), gx)?);
                }
                acc(*w, Tensor::new(tw.shape(), gw)?);
                if let Some(b) = b {
                    acc(*b, Tensor::new(&[o], gb)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let (outer, _, inner) = axis_split(shape, 1);
                let m = (outer * inner) as f64;
                let tg = self.value(*gamma);
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    let positions = (0..outer).flat_map(|o| {
                        let base = (o * c + ch) * inner;
                        base..base + inner
                    });
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for i in positions.clone() {
                        let dy = g.data()[i];
                        gbeta[ch] += dy;
                        ggamma[ch] += dy * xhat[i];
                        let dxhat = dy * tg.data()[ch];
                        s1 += dxhat;
                        s2 += dxhat * xhat[i];
                    }
                    for i in positions {
                        let dxhat = g.data()[i] * tg.data()[ch];
                        gx[i] = if *training {
                            inv_std[ch] / m * (m * dxhat - s1 - xhat[i] * s2)
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                }
                acc(*x, Tensor::new(shape, gx)?);
                acc(*gamma, Tensor::new(&[c], ggamma)?);
                acc(*beta, Tensor::new(&[c], gbeta)?);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let e = tt.shape()[1];
                let mut gt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &s) in gt[id * e..(id + 1) * e].iter_mut().zip(&g.data()[r * e..(r + 1) * e]) {
                        *d += s;
                    }
                }
                acc(*table, Tensor::new(tt.shape(), gt)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let shape = self.shape(*logits);
                let v = shape[1];
                let scale = g.item();
                let mut gl = vec![0.0; probs.len()];
                for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * v + j] = scale * (probs[r * v + j] - onehot);
                    }
                }
                acc(*logits, Tensor::new(shape, gl)?);
            }
        }
        Ok(())
    }
}
