//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node that records its inputs, so node ids are
//! a topological order by construction. [`Tape::backward`] walks the tape
//! once in reverse, accumulating vector-Jacobian products into each node's
//! gradient. Nodes built only from constants carry no gradient and are
//! skipped.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::glam::{bucket_attention_backward, bucket_attention_forward};
use crate::slh::BucketAssignment;
use crate::tensor::{col2im, for_each_chunk, gemm, im2col, numel, permute, ConvGeometry, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    BucketAttention {
        q: Var,
        k: Var,
        v: Var,
        ass: Var,
        buckets: Arc<Vec<BucketAssignment>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::BucketAttention { .. } => "bucket_attention",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gelu(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::LogSigmoid(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis(x, _) => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::BucketAttention { q, k, v, ass, .. } => vec![*q, *k, *v, *ass],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation, plus the gradients after [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "input".into() });
        }
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad))
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().into() });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    // ---------------------------------------------------------------- algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bn * m * n];
        for_each_chunk(&mut out, m * n, |i, c| {
            gemm(false, false, m, k, n, &da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], c, false);
        });
        self.push(Tensor::from_parts(vec![bn, m, n], out), Op::BatchMatMul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(a, b))
    }

    /// Adds a `[c]` bias along the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = *vx.shape().last().unwrap_or(&1);
        if vb.ndim() != 1 || vb.shape()[0] != c || vx.ndim() == 0 {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let bias = vb.data();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(out, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    // ---------------------------------------------------------- activations

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu(x, s))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_value);
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid_value);
        self.push(out, Op::Sigmoid(x))
    }

    /// `log(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            let m = if v < T::zero() { v } else { T::zero() };
            m - (-v.abs()).exp().ln_1p()
        });
        self.push(out, Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = last_dim(vx)?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(out, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = last_dim(vx)?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(out, Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = last_dim(vx)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::shape("layer_norm", vx.shape(), g.shape()));
        }
        let rows = vx.len() / c;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        let inv_c = T::lit(1.0 / c as f64);
        let eps = T::lit(LN_EPS);
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    // ------------------------------------------------------------ structure

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.ndim()];
        if perm.len() != vx.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", vx.shape(), perm));
        }
        let out = permute(vx, perm);
        self.push(out, Op::Permute(x, perm.to_vec()))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let span = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.push(out, Op::Mean(x))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return Err(Error::invalid(format!("sum_axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &v.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis))
    }

    // ---------------------------------------------------------- convolution

    /// `x [N,C,H,W]`, `w [O,C,k,k]`, optional `b [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let g = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride: spec.stride,
            pad: spec.pad,
        };
        if !g.valid() {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let o = sw[0];
        check_bias(self, b, o, "conv2d")?;
        let (ho, wo) = (g.out_height(), g.out_width());
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let plane = g.channels * g.height * g.width;
        let mut out = vec![T::zero(); sx[0] * o * ho * wo];
        for_each_chunk(&mut out, o * ho * wo, |n, chunk| {
            let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
            im2col(&xd[n * plane..(n + 1) * plane], &g, &mut cols);
            gemm(false, false, o, g.col_rows(), g.col_cols(), wd, &cols, chunk, false);
            if let Some(bias) = bias {
                add_channel_bias(chunk, bias, ho * wo);
            }
        });
        self.push(Tensor::from_parts(vec![sx[0], o, ho, wo], out), Op::Conv2d { x, w, b, spec })
    }

    /// `x [N,C,H,W]`, `w [C,O,k,k]`, optional `b [O]`. Output extent is
    /// `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] || spec.stride == 0 {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let (k, o) = (sw[2], sw[1]);
        let full_h = (sx[2] - 1) * spec.stride + k;
        let full_w = (sx[3] - 1) * spec.stride + k;
        if full_h <= 2 * spec.pad || full_w <= 2 * spec.pad {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let g = ConvGeometry {
            channels: o,
            height: full_h - 2 * spec.pad,
            width: full_w - 2 * spec.pad,
            kernel: k,
            stride: spec.stride,
            pad: spec.pad,
        };
        check_bias(self, b, o, "conv_transpose2d")?;
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let out_plane = o * g.height * g.width;
        let mut out = vec![T::zero(); sx[0] * out_plane];
        for_each_chunk(&mut out, out_plane, |n, chunk| {
            let mut cols = vec![T::zero(); g.col_rows() * hw];
            gemm(true, false, g.col_rows(), c, hw, wd, &xd[n * c * hw..(n + 1) * c * hw], &mut cols, false);
            col2im(&cols, &g, chunk);
            if let Some(bias) = bias {
                add_channel_bias(chunk, bias, g.height * g.width);
            }
        });
        let shape = vec![sx[0], o, g.height, g.width];
        self.push(Tensor::from_parts(shape, out), Op::ConvTranspose2d { x, w, b, spec })
    }

    /// Softmax attention restricted to hash buckets.
    ///
    /// `q, k, v: [N,n,c]`, `ass: [N,n,1]` (an additive per-query score),
    /// `buckets[s]` partitions the `n` tokens of sample `s`.
    pub fn bucket_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        ass: Var,
        buckets: Arc<Vec<BucketAssignment>>,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape("bucket_attention", &sq, self.shape(k)));
        }
        if self.shape(ass) != [sq[0], sq[1], 1] {
            return Err(Error::shape("bucket_attention", &sq, self.shape(ass)));
        }
        if buckets.len() != sq[0] || buckets.iter().any(|b| b.len() != sq[1]) {
            return Err(Error::invalid("bucket_attention: assignment inconsistent with token count"));
        }
        let (n, c) = (sq[1], sq[2]);
        let (qd, kd, vd, ad) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(ass).data(),
        );
        let mut out = vec![T::zero(); sq[0] * n * c];
        for (s, chunk) in out.chunks_mut(n * c).enumerate() {
            let r = s * n * c..(s + 1) * n * c;
            let o = bucket_attention_forward(
                &qd[r.clone()],
                &kd[r.clone()],
                &vd[r],
                &ad[s * n..(s + 1) * n],
                c,
                &buckets[s],
            )?;
            chunk.copy_from_slice(&o);
        }
        self.push(
            Tensor::from_parts(sq, out),
            Op::BucketAttention {
                q,
                k,
                v,
                ass,
                buckets,
            },
        )
    }

    // ------------------------------------------------------------ composites

    /// `x [..., in] * w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let rows = numel(&sx) / sw[0];
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `root`. Gradients of earlier
    /// sweeps are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("unknown root node {}", root.0)));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.parents().iter().any(|p| p.0 >= i) {
                return Err(Error::Backward(format!("cycle detected at node {i} ({})", node.op.name())));
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::ones(&root_shape));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (p, pg) in self.vjp(i, &g)? {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc = acc.zip_map(&pg, |a, b| a + b)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Tensor<T> {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn grad_opt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, true, m, n, k, gd, vb.data(), &mut da, false);
                    out.push((*a, Tensor::from_parts(vec![m, k], da)));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(true, false, k, m, n, va.data(), gd, &mut db, false);
                    out.push((*b, Tensor::from_parts(vec![k, n], db)));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bn, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); bn * m * k];
                    for_each_chunk(&mut da, m * k, |s, c| {
                        gemm(false, true, m, n, k, &gd[s * m * n..(s + 1) * m * n], &vb.data()[s * k * n..(s + 1) * k * n], c, false)
                    });
                    out.push((*a, Tensor::from_parts(va.shape().to_vec(), da)));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bn * k * n];
                    for_each_chunk(&mut db, k * n, |s, c| {
                        gemm(true, false, k, m, n, &va.data()[s * m * k..(s + 1) * m * k], &gd[s * m * n..(s + 1) * m * n], c, false)
                    });
                    out.push((*b, Tensor::from_parts(vb.shape().to_vec(), db)));
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (sx, sw) = (vx.shape(), vw.shape());
                let geo = ConvGeometry {
                    channels: sx[1],
                    height: sx[2],
                    width: sx[3],
                    kernel: sw[2],
                    stride: spec.stride,
                    pad: spec.pad,
                };
                let (o, ckk, hw) = (sw[0], geo.col_rows(), geo.col_cols());
                let plane = sx[1] * sx[2] * sx[3];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); vx.len()];
                    for_each_chunk(&mut dx, plane, |n, chunk| {
                        let mut dcols = vec![T::zero(); ckk * hw];
                        gemm(true, false, ckk, o, hw, vw.data(), &gd[n * o * hw..(n + 1) * o * hw], &mut dcols, false);
                        col2im(&dcols, &geo, chunk);
                    });
                    out.push((*x, Tensor::from_parts(sx.to_vec(), dx)));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); vw.len()];
                    let mut cols = vec![T::zero(); ckk * hw];
                    for n in 0..sx[0] {
                        im2col(&vx.data()[n * plane..(n + 1) * plane], &geo, &mut cols);
                        gemm(false, true, o, hw, ckk, &gd[n * o * hw..(n + 1) * o * hw], &cols, &mut dw, true);
                    }
                    out.push((*w, Tensor::from_parts(sw.to_vec(), dw)));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    out.push((b, channel_bias_grad(gd, sx[0], o, hw)));
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (sx, sw) = (vx.shape(), vw.shape());
                let geo = ConvGeometry {
                    channels: sw[1],
                    height: y.shape()[2],
                    width: y.shape()[3],
                    kernel: sw[2],
                    stride: spec.stride,
                    pad: spec.pad,
                };
                let (c, hw, okk) = (sx[1], sx[2] * sx[3], geo.col_rows());
                let out_plane = geo.channels * geo.height * geo.width;
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = vec![T::zero(); if need_x { vx.len() } else { 0 }];
                let mut dw = vec![T::zero(); if need_w { vw.len() } else { 0 }];
                let mut dcols = vec![T::zero(); okk * hw];
                for n in 0..sx[0] {
                    im2col(&gd[n * out_plane..(n + 1) * out_plane], &geo, &mut dcols);
                    if need_x {
                        gemm(false, false, c, okk, hw, vw.data(), &dcols, &mut dx[n * c * hw..(n + 1) * c * hw], false);
                    }
                    if need_w {
                        gemm(false, true, c, hw, okk, &vx.data()[n * c * hw..(n + 1) * c * hw], &dcols, &mut dw, true);
                    }
                }
                if need_x {
                    out.push((*x, Tensor::from_parts(sx.to_vec(), dx)));
                }
                if need_w {
                    out.push((*w, Tensor::from_parts(sw.to_vec(), dw)));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    out.push((b, channel_bias_grad(gd, sx[0], geo.channels, geo.height * geo.width)));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *y.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                if self.needs(*x) {
                    let inv_c = T::lit(1.0 / c as f64);
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let (gr, hr) = (&gd[span.clone()], &xhat[span.clone()]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            dx[r * c + j] = rs * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, Tensor::from_parts(y.shape().to_vec(), dx)));
                }
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for (row_g, row_h) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                    out.push((*gamma, Tensor::from_parts(vec![c], dg)));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![c], column_sums(gd, c))));
                }
            }
            Op::Gelu(x) => {
                let d = self.value(*x).zip_map(g, |v, gg| gg * gelu_grad(v))?;
                out.push((*x, d));
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(g, |v, gg| if v > T::zero() { gg } else { T::zero() })?;
                out.push((*x, d));
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let d = self.value(*x).zip_map(g, |v, gg| if v > T::zero() { gg } else { gg * s })?;
                out.push((*x, d));
            }
            Op::Sigmoid(x) => out.push((*x, y.zip_map(g, |s, gg| gg * s * (T::one() - s))?)),
            Op::LogSigmoid(x) => {
                let d = self.value(*x).zip_map(g, |v, gg| gg * sigmoid_value(-v))?;
                out.push((*x, d));
            }
            Op::Log(x) => out.push((*x, self.value(*x).zip_map(g, |v, gg| gg / v)?)),
            Op::Softmax(x) => {
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, Tensor::from_parts(y.shape().to_vec(), d)));
            }
            Op::LogSoftmax(x) => {
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                out.push((*x, Tensor::from_parts(y.shape().to_vec(), d)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |gg, vb| gg * vb)?));
                out.push((*b, g.zip_map(self.value(*a), |gg, va| gg * va)?));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                out.push((*a, g.zip_map(vb, |gg, d| gg / d)?));
                let num = g.zip_map(y, |gg, q| gg * q)?;
                out.push((*b, num.zip_map(vb, |t, d| -t / d)?));
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                let c = self.shape(*b)[0];
                out.push((*b, Tensor::from_parts(vec![c], column_sums(gd, c))));
            }
            Op::Scale(x, s) => {
                let s = *s;
                out.push((*x, g.map(|v| v * s)));
            }
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Reshape(x) => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, permute(g, &inv)));
            }
            Op::Concat(xs, axis) => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let sx = self.shape(x);
                    let span = sx[*axis] * inner;
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(numel(sx));
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            d.extend_from_slice(&gd[start..start + span]);
                        }
                        out.push((x, Tensor::from_parts(sx.to_vec(), d)));
                    }
                    offset += span;
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), g.item() / n)));
            }
            Op::SumAxis(x, axis) => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let mut d = Vec::with_capacity(numel(sx));
                for o in 0..outer {
                    for _ in 0..n {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, Tensor::from_parts(sx.to_vec(), d)));
            }
            Op::BucketAttention {
                q,
                k,
                v,
                ass,
                buckets,
            } => {
                let s = self.shape(*q);
                let (bn, n, c) = (s[0], s[1], s[2]);
                let mut dq = vec![T::zero(); bn * n * c];
                let mut dk = dq.clone();
                let mut dv = dq.clone();
                let mut da = vec![T::zero(); bn * n];
                for smp in 0..bn {
                    let r = smp * n * c..(smp + 1) * n * c;
                    let grads = bucket_attention_backward(
                        &self.value(*q).data()[r.clone()],
                        &self.value(*k).data()[r.clone()],
                        &self.value(*v).data()[r.clone()],
                        &self.value(*ass).data()[smp * n..(smp + 1) * n],
                        &gd[r.clone()],
                        c,
                        &buckets[smp],
                    );
                    dq[r.clone()].copy_from_slice(&grads.dq);
                    dk[r.clone()].copy_from_slice(&grads.dk);
                    dv[r].copy_from_slice(&grads.dv);
                    da[smp * n..(smp + 1) * n].copy_from_slice(&grads.dass);
                }
                out.push((*q, Tensor::from_parts(s.to_vec(), dq)));
                out.push((*k, Tensor::from_parts(s.to_vec(), dk)));
                out.push((*v, Tensor::from_parts(s.to_vec(), dv)));
                out.push((*ass, Tensor::from_parts(vec![bn, n, 1], da)));
            }
        }
        Ok(out)
    }

    #[cfg(test)]
    pub(crate) fn corrupt_parent_for_test(&mut self, node: Var, parent: Var) {
        self.nodes[node.0].op = Op::Scale(parent, T::one());
    }
}

fn last_dim<T: Real>(v: &Tensor<T>) -> Result<usize> {
    v.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::invalid("operation needs at least one axis"))
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn check_bias<T: Real>(tape: &Tape<T>, b: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
    match b {
        Some(b) if tape.shape(b) != [channels] => Err(Error::shape(op, &[channels], tape.shape(b))),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Real>(chunk: &mut [T], bias: &[T], plane: usize) {
    for (ch, &bb) in chunk.chunks_mut(plane).zip(bias) {
        for v in ch {
            *v += bb;
        }
    }
}

fn channel_bias_grad<T: Real>(g: &[T], batch: usize, channels: usize, plane: usize) -> Tensor<T> {
    let mut d = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, dc) in d.iter_mut().enumerate() {
            let start = (n * channels + c) * plane;
            *dc += g[start..start + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![channels], d)
}

fn column_sums<T: Real>(g: &[T], c: usize) -> Vec<T> {
    let mut d = vec![T::zero(); c];
    for row in g.chunks(c) {
        for (a, &b) in d.iter_mut().zip(row) {
            *a += b;
        }
    }
    d
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn sigmoid_value<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn gelu_value<T: Real>(v: T) -> T {
    let x = v.as_f64();
    T::lit(0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
}

fn gelu_grad<T: Real>(v: T) -> T {
    let x = v.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::lit(cdf + x * pdf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[3])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_and_gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 0.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let g = tape.gelu(x).unwrap();
        assert_eq!(tape.value(r).data()[0], 0.0);
        assert_eq!(tape.value(g).data()[1], 0.0);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 5, 5])).unwrap();
        let w = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3])).unwrap();
        let y = tape.conv2d(x, w, None, Conv2dSpec { stride: 1, pad: 0 }).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f(x) = x*x + x  =>  f'(x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let f = tape.add(sq, x).unwrap();
        let s = tape.sum(f).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, -1.0, 5.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Backward(_))));
    }

    #[test]
    fn cycle_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0])).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        let z = tape.scale(y, 2.0).unwrap();
        tape.corrupt_parent_for_test(y, z);
        let err = tape.backward(z).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn non_finite_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.leaf(t(&[1], &[f64::NAN])).is_err());
        let x = tape.leaf(t(&[1], &[0.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn conv_transpose_inverts_stride_geometry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 4, 4])).unwrap();
        let w = tape.constant(Tensor::ones(&[3, 5, 2, 2])).unwrap();
        let y = tape.conv_transpose2d(x, w, None, Conv2dSpec { stride: 2, pad: 0 }).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 8, 8]);
        // Non-overlapping taps: every output pixel sees exactly one input pixel per channel.
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
    }
}
