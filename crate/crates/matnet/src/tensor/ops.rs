//! Differentiable tensor operations.
//!
//! Each function validates shapes, computes the forward value, and records a
//! node on the tape. With an inert tape only the forward value is produced.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::tape::{GradMap, Op, Tape};
use crate::tensor::{kernels, Tensor};

fn require_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape().to_string(), b.shape().to_string()));
    }
    Ok(())
}

fn unary<S: Scalar>(
    t: &mut Tape<S>,
    op: Op,
    x: &Tensor<S>,
    f: impl Fn(S) -> S,
) -> Result<Tensor<S>> {
    let data: Vec<S> = x.data().iter().map(|v| f(*v)).collect();
    let out = Tensor::from_parts(Arc::new(data), x.shape().clone());
    t.record(op, &[x], out)
}

fn binary<S: Scalar>(
    t: &mut Tape<S>,
    op: Op,
    name: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    require_same_shape(name, a, b)?;
    let data: Vec<S> = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    let out = Tensor::from_parts(Arc::new(data), a.shape().clone());
    t.record(op, &[a, b], out)
}

pub fn add<S: Scalar>(t: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    binary(t, Op::Add, "add", a, b, |x, y| x + y)
}

pub fn sub<S: Scalar>(t: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    binary(t, Op::Sub, "sub", a, b, |x, y| x - y)
}

pub fn mul<S: Scalar>(t: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    binary(t, Op::Mul, "mul", a, b, |x, y| x * y)
}

pub fn scale<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, c: f64) -> Result<Tensor<S>> {
    let cs = S::of(c);
    unary(t, Op::Scale(c), x, |v| v * cs)
}

pub fn neg<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    scale(t, x, -1.0)
}

pub fn add_scalar<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, c: f64) -> Result<Tensor<S>> {
    let cs = S::of(c);
    unary(t, Op::AddScalar(c), x, |v| v + cs)
}

pub fn exp<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    unary(t, Op::Exp, x, |v| v.exp())
}

pub fn ln<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    unary(t, Op::Ln, x, |v| v.ln())
}

pub fn sigmoid<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    unary(t, Op::Sigmoid, x, |v| S::one() / (S::one() + (-v).exp()))
}

pub fn tanh<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    unary(t, Op::Tanh, x, |v| v.tanh())
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    unary(t, Op::Softplus, x, |v| {
        if v > S::zero() {
            v + (S::one() + (-v).exp()).ln()
        } else {
            (S::one() + v.exp()).ln()
        }
    })
}

/// Leaky ReLU: x if x >= 0 else slope * x. Slope must lie in (0, 1).
pub fn lrelu<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, slope: f64) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&slope) || slope == 0.0 {
        return Err(Error::invalid("lrelu", format!("slope must be in (0,1), got {slope}")));
    }
    let s = S::of(slope);
    unary(t, Op::Lrelu(slope), x, |v| if v >= S::zero() { v } else { v * s })
}

pub fn clamp<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, lo: f64, hi: f64) -> Result<Tensor<S>> {
    let (l, h) = (S::of(lo), S::of(hi));
    unary(t, Op::Clamp(lo, hi), x, |v| v.max(l).min(h))
}

/// Elementwise max(x, c); used to floor probabilities before logs.
pub fn clamp_min<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, c: f64) -> Result<Tensor<S>> {
    clamp(t, x, c, f64::INFINITY)
}

/// Sum of all entries, as a 1-element tensor.
pub fn sum_all<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut acc = S::zero();
    for v in x.data() {
        acc += *v;
    }
    let out = Tensor::from_vec(vec![acc], &[1]);
    t.record(Op::SumAll, &[x], out)
}

/// Mean of all entries, as a 1-element tensor.
pub fn mean_all<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = sum_all(t, x)?;
    scale(t, &s, 1.0 / x.numel() as f64)
}

/// Tile a batch-1 tensor across a batch: (1, ...) -> (b, ...).
pub fn broadcast_batch<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, b: usize) -> Result<Tensor<S>> {
    if x.shape().batch() != 1 {
        return Err(Error::shape("broadcast_batch", "batch dim 1", x.shape().to_string()));
    }
    let per = x.shape().per_example();
    let mut dims = x.dims().to_vec();
    dims[0] = b;
    let mut data = vec![S::zero(); b * per];
    for bi in 0..b {
        data[bi * per..(bi + 1) * per].copy_from_slice(x.data());
    }
    let out = Tensor::from_vec(data, &dims);
    t.record(Op::BroadcastBatch, &[x], out)
}

/// Reduce all non-batch axes: (b, ...) -> (b).
pub fn sum_per_example<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let b = x.shape().batch();
    let per = x.shape().per_example();
    let mut data = vec![S::zero(); b];
    for (bi, slot) in data.iter_mut().enumerate() {
        let mut acc = S::zero();
        for v in &x.data()[bi * per..(bi + 1) * per] {
            acc += *v;
        }
        *slot = acc;
    }
    let out = Tensor::from_vec(data, &[b]);
    t.record(Op::SumPerExample, &[x], out)
}

/// Shape-preserving convolution with odd kernel and (k-1)/2 zero padding.
///
/// input (b, c_in, h, w), kernel (c_out, c_in, k, k), bias (c_out).
pub fn conv2d_same<S: Scalar>(
    t: &mut Tape<S>,
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    conv2d(t, input, kernel, bias, 1)
}

fn conv2d<S: Scalar>(
    t: &mut Tape<S>,
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>> {
    if input.shape().rank() != 4 || kernel.shape().rank() != 4 {
        return Err(Error::shape("conv2d", "rank-4 input and kernel", format!("{} and {}", input.shape(), kernel.shape())));
    }
    let kd = kernel.dims();
    let (co, ci, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if ci != input.shape().features() {
        return Err(Error::shape(
            "conv2d",
            format!("kernel input channels {}", input.shape().features()),
            format!("{ci}"),
        ));
    }
    if bias.dims() != [co] {
        return Err(Error::shape("conv2d", format!("bias ({co})"), bias.shape().to_string()));
    }
    let (b, h, w) = (input.shape().batch(), input.shape().hw().0, input.shape().hw().1);
    let pad = (kh - 1) / 2;
    if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::invalid(
            "strided_resample",
            format!("downsample needs even spatial dims, got {h}x{w}"),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut data = vec![S::zero(); b * co * oh * ow];
    kernels::conv2d_fwd(input.data(), kernel.data(), bias.data(), &mut data, b, ci, h, w, co, kh, stride, pad);
    let out = Tensor::from_vec(data, &[b, co, oh, ow]);
    t.record(Op::Conv2d { stride, pad }, &[input, kernel, bias], out)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Resample {
    Down,
    Up,
}

/// Stride-2 resampling: `Down` halves spatial dims via strided convolution,
/// `Up` doubles them via the transposed form. Kernel layout is
/// (c_out, c_in, k, k) for both directions.
pub fn strided_resample<S: Scalar>(
    t: &mut Tape<S>,
    input: &Tensor<S>,
    direction: Resample,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    match direction {
        Resample::Down => conv2d(t, input, kernel, bias, 2),
        Resample::Up => {
            if input.shape().rank() != 4 || kernel.shape().rank() != 4 {
                return Err(Error::shape(
                    "strided_resample",
                    "rank-4 input and kernel",
                    format!("{} and {}", input.shape(), kernel.shape()),
                ));
            }
            let kd = kernel.dims();
            let (co, ci, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
            if kh != kw || kh % 2 == 0 {
                return Err(Error::invalid(
                    "strided_resample",
                    format!("kernel must be square and odd, got {kh}x{kw}"),
                ));
            }
            if ci != input.shape().features() {
                return Err(Error::shape(
                    "strided_resample",
                    format!("kernel input channels {}", input.shape().features()),
                    format!("{ci}"),
                ));
            }
            if bias.dims() != [co] {
                return Err(Error::shape("strided_resample", format!("bias ({co})"), bias.shape().to_string()));
            }
            let (b, h, w) = (input.shape().batch(), input.shape().hw().0, input.shape().hw().1);
            let (oh, ow) = (2 * h, 2 * w);
            let pad = (kh - 1) / 2;
            let mut data = vec![S::zero(); b * co * oh * ow];
            kernels::convt2d_fwd(
                input.data(), kernel.data(), bias.data(), &mut data, b, ci, h, w, co, kh, 2, pad, oh, ow,
            );
            let out = Tensor::from_vec(data, &[b, co, oh, ow]);
            t.record(Op::ConvT2d { stride: 2, pad }, &[input, kernel, bias], out)
        }
    }
}

/// Affine map: x (b, n), weight (m, n), bias (m) -> (b, m).
pub fn linear<S: Scalar>(
    t: &mut Tape<S>,
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    if x.shape().rank() != 2 || weight.shape().rank() != 2 {
        return Err(Error::shape("linear", "rank-2 input and weight", format!("{} and {}", x.shape(), weight.shape())));
    }
    let (b, n) = (x.shape().batch(), x.shape().features());
    let (m, wn) = (weight.shape().batch(), weight.shape().features());
    if wn != n {
        return Err(Error::shape("linear", format!("weight (m,{n})"), weight.shape().to_string()));
    }
    if bias.dims() != [m] {
        return Err(Error::shape("linear", format!("bias ({m})"), bias.shape().to_string()));
    }
    let mut data = vec![S::zero(); b * m];
    kernels::linear_fwd(x.data(), weight.data(), bias.data(), &mut data, b, n, m);
    let out = Tensor::from_vec(data, &[b, m]);
    t.record(Op::Linear, &[x, weight, bias], out)
}

/// Concatenate along the feature axis. All parts must share batch and
/// trailing dims; order is preserved.
pub fn concat_features<S: Scalar>(t: &mut Tape<S>, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_features", "no parts given"));
    }
    let first = parts[0].shape();
    let mut total_features = 0;
    for p in parts {
        let s = p.shape();
        if s.rank() != first.rank()
            || s.batch() != first.batch()
            || s.dims()[2..] != first.dims()[2..]
        {
            return Err(Error::shape("concat_features", first.to_string(), s.to_string()));
        }
        total_features += s.features();
    }
    let b = first.batch();
    let trailing: usize = first.dims()[2..].iter().product();
    let out_shape = first.with_features(total_features);
    let out_block = total_features * trailing;
    let mut data = vec![S::zero(); out_shape.numel()];
    for bi in 0..b {
        let mut offset = 0;
        for p in parts {
            let block = p.shape().features() * trailing;
            data[bi * out_block + offset..bi * out_block + offset + block]
                .copy_from_slice(&p.data()[bi * block..(bi + 1) * block]);
            offset += block;
        }
    }
    let out = Tensor::from_parts(Arc::new(data), out_shape);
    t.record(Op::ConcatFeatures, parts, out)
}

/// Contiguous slice along the feature axis: features [start, start+len).
pub fn slice_features<S: Scalar>(
    t: &mut Tape<S>,
    x: &Tensor<S>,
    start: usize,
    len: usize,
) -> Result<Tensor<S>> {
    let f = x.shape().features();
    if x.shape().rank() < 2 || start + len > f || len == 0 {
        return Err(Error::invalid(
            "slice_features",
            format!("slice [{start}, {}) out of {f} features of {}", start + len, x.shape()),
        ));
    }
    let b = x.shape().batch();
    let trailing: usize = x.dims()[2..].iter().product();
    let in_block = f * trailing;
    let out_block = len * trailing;
    let off = start * trailing;
    let mut data = vec![S::zero(); b * out_block];
    for bi in 0..b {
        data[bi * out_block..(bi + 1) * out_block]
            .copy_from_slice(&x.data()[bi * in_block + off..bi * in_block + off + out_block]);
    }
    let out = Tensor::from_parts(Arc::new(data), x.shape().with_features(len));
    t.record(Op::SliceFeatures { start }, &[x], out)
}

/// Differentiable reshape to a new shape of equal element count.
pub fn reshape<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>, dims: &[usize]) -> Result<Tensor<S>> {
    let shape = Shape::new(dims);
    if shape.numel() != x.numel() {
        return Err(Error::shape("reshape", format!("{} elements", x.numel()), shape.to_string()));
    }
    let out = Tensor::from_parts(x.data_arc(), shape);
    t.record(Op::Reshape, &[x], out)
}

/// Row-wise log-sum-exp with internal max shift: (b, k) -> (b).
pub fn row_logsumexp<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape().rank() != 2 {
        return Err(Error::shape("row_logsumexp", "rank-2", x.shape().to_string()));
    }
    let (b, k) = (x.shape().batch(), x.shape().features());
    let mut data = vec![S::zero(); b];
    for bi in 0..b {
        let row = &x.data()[bi * k..(bi + 1) * k];
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut acc = S::zero();
        for v in row {
            acc += (*v - m).exp();
        }
        data[bi] = m + acc.ln();
    }
    let out = Tensor::from_vec(data, &[b]);
    t.record(Op::RowLogSumExp, &[x], out)
}

/// Row-wise softmax with internal max shift: (b, k) -> (b, k).
pub fn row_softmax<S: Scalar>(t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape().rank() != 2 {
        return Err(Error::shape("row_softmax", "rank-2", x.shape().to_string()));
    }
    let (b, k) = (x.shape().batch(), x.shape().features());
    let mut data = vec![S::zero(); b * k];
    for bi in 0..b {
        let row = &x.data()[bi * k..(bi + 1) * k];
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (j, v) in row.iter().enumerate() {
            let e = (*v - m).exp();
            data[bi * k + j] = e;
            z += e;
        }
        for j in 0..k {
            data[bi * k + j] /= z;
        }
    }
    let out = Tensor::from_vec(data, &[b, k]);
    t.record(Op::RowSoftmax, &[x], out)
}

/// Accumulate gradients of a scalar root with respect to every tensor the
/// tape has seen. Consumes the tape.
pub fn backward<S: Scalar>(t: &mut Tape<S>, root: &Tensor<S>) -> Result<GradMap<S>> {
    t.backward(root)
}
