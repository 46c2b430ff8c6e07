//! Differentiation tape: records ops during the forward pass, replays them in
//! reverse to accumulate vector-Jacobian products.
//!
//! The tape tracks tensors by id; any tensor first seen as an op input is
//! attached as a leaf. A tape is rebuilt per forward pass and consumed by a
//! single `backward` call.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::{kernels, Tensor, TensorId};

/// Recorded operation kind. Saved values live on the nodes themselves.
/// Constants are kept on the variants even when the VJP does not need them,
/// so a dumped tape fully describes the forward pass.
#[derive(Clone, Debug)]
#[allow(dead_code)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Softplus,
    Lrelu(f64),
    Clamp(f64, f64),
    SumAll,
    SumPerExample,
    BroadcastBatch,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Linear,
    ConcatFeatures,
    SliceFeatures { start: usize },
    Reshape,
    RowLogSumExp,
    RowSoftmax,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softplus => "softplus",
            Op::Lrelu(_) => "lrelu",
            Op::Clamp(..) => "clamp",
            Op::SumAll => "sum_all",
            Op::SumPerExample => "sum_per_example",
            Op::BroadcastBatch => "broadcast_batch",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::Linear => "linear",
            Op::ConcatFeatures => "concat_features",
            Op::SliceFeatures { .. } => "slice_features",
            Op::Reshape => "reshape",
            Op::RowLogSumExp => "row_logsumexp",
            Op::RowSoftmax => "row_softmax",
        }
    }
}

struct Node<S: Scalar> {
    op: Op,
    inputs: Vec<usize>,
    value: Arc<Vec<S>>,
    shape: Shape,
    tid: TensorId,
}

/// Gradient map produced by [`Tape::backward`], keyed by tensor identity.
/// Absent entries mean no gradient flowed (identically zero).
pub struct GradMap<S: Scalar> {
    grads: HashMap<TensorId, Tensor<S>>,
}

impl<S: Scalar> GradMap<S> {
    pub fn get(&self, t: &Tensor<S>) -> Option<&Tensor<S>> {
        self.grads.get(&t.id())
    }

    /// Gradient with zeros standing in when none flowed.
    pub fn wrt(&self, t: &Tensor<S>) -> Tensor<S> {
        match self.grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.dims()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Wengert-style tape. Create one per forward pass with [`Tape::new`], or an
/// inert one with [`Tape::inert`] when no gradients are needed.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    index: HashMap<TensorId, usize>,
    recording: bool,
    checked: bool,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            index: HashMap::new(),
            recording: true,
            checked: false,
            consumed: false,
        }
    }

    /// A tape that records nothing; ops still compute forward values.
    pub fn inert() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    /// Enable NaN/Inf detection on every op output.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn attach(&mut self, t: &Tensor<S>) -> usize {
        if let Some(&i) = self.index.get(&t.id()) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t.data_arc(),
            shape: t.shape().clone(),
            tid: t.id(),
        });
        self.index.insert(t.id(), i);
        i
    }

    /// Record one op. `out` was already computed by the caller.
    pub(crate) fn record(&mut self, op: Op, inputs: &[&Tensor<S>], out: Tensor<S>) -> Result<Tensor<S>> {
        if self.checked && !out.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        if !self.recording {
            return Ok(out);
        }
        if self.consumed {
            return Err(Error::Backward(
                "tape already consumed by backward(); build a fresh tape".into(),
            ));
        }
        let input_ids: Vec<usize> = inputs.iter().map(|t| self.attach(t)).collect();
        let i = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: input_ids,
            value: out.data_arc(),
            shape: out.shape().clone(),
            tid: out.id(),
        });
        self.index.insert(out.id(), i);
        Ok(out)
    }

    /// Reverse sweep from a scalar root. Consumes the tape: a second call is
    /// a checked error.
    pub fn backward(&mut self, root: &Tensor<S>) -> Result<GradMap<S>> {
        if self.consumed {
            return Err(Error::Backward("backward() called twice on one tape".into()));
        }
        if !self.recording {
            return Err(Error::Backward("backward() on an inert tape".into()));
        }
        if !root.shape().is_scalar() {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {}",
                root.shape()
            )));
        }
        let root_idx = *self
            .index
            .get(&root.id())
            .ok_or_else(|| Error::Backward("root tensor is not on this tape".into()))?;
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        grads[root_idx] = Some(vec![S::one()]);

        for i in (0..=root_idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = grads[i].take() {
                debug_assert_eq!(g.len(), node.shape.numel());
                map.insert(node.tid, Tensor::from_parts(Arc::new(g), node.shape.clone()));
            }
        }
        Ok(GradMap { grads: map })
    }

    fn accumulate(grads: &mut [Option<Vec<S>>], idx: usize, contrib: Vec<S>) {
        match &mut grads[idx] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let val = |j: usize| -> &[S] { &self.nodes[ins[j]].value };
        let shp = |j: usize| -> &Shape { &self.nodes[ins[j]].shape };

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                Self::accumulate(grads, ins[0], g.to_vec());
                Self::accumulate(grads, ins[1], g.to_vec());
            }
            Op::Sub => {
                Self::accumulate(grads, ins[0], g.to_vec());
                Self::accumulate(grads, ins[1], g.iter().map(|v| -*v).collect());
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                Self::accumulate(grads, ins[0], g.iter().zip(b).map(|(d, y)| *d * *y).collect());
                Self::accumulate(grads, ins[1], g.iter().zip(a).map(|(d, x)| *d * *x).collect());
            }
            Op::Scale(c) => {
                let c = S::of(*c);
                Self::accumulate(grads, ins[0], g.iter().map(|d| *d * c).collect());
            }
            Op::AddScalar(_) => {
                Self::accumulate(grads, ins[0], g.to_vec());
            }
            Op::Exp => {
                let out = &node.value;
                Self::accumulate(grads, ins[0], g.iter().zip(out.iter()).map(|(d, o)| *d * *o).collect());
            }
            Op::Ln => {
                let x = val(0);
                Self::accumulate(grads, ins[0], g.iter().zip(x).map(|(d, v)| *d / *v).collect());
            }
            Op::Sigmoid => {
                let out = &node.value;
                Self::accumulate(
                    grads,
                    ins[0],
                    g.iter()
                        .zip(out.iter())
                        .map(|(d, o)| *d * *o * (S::one() - *o))
                        .collect(),
                );
            }
            Op::Tanh => {
                let out = &node.value;
                Self::accumulate(
                    grads,
                    ins[0],
                    g.iter()
                        .zip(out.iter())
                        .map(|(d, o)| *d * (S::one() - *o * *o))
                        .collect(),
                );
            }
            Op::Softplus => {
                // d softplus(x) = sigmoid(x)
                let x = val(0);
                Self::accumulate(
                    grads,
                    ins[0],
                    g.iter()
                        .zip(x)
                        .map(|(d, v)| {
                            let s = S::one() / (S::one() + (-*v).exp());
                            *d * s
                        })
                        .collect(),
                );
            }
            Op::Lrelu(slope) => {
                let s = S::of(*slope);
                let x = val(0);
                Self::accumulate(
                    grads,
                    ins[0],
                    g.iter()
                        .zip(x)
                        .map(|(d, v)| if *v >= S::zero() { *d } else { *d * s })
                        .collect(),
                );
            }
            Op::Clamp(lo, hi) => {
                let (lo, hi) = (S::of(*lo), S::of(*hi));
                let x = val(0);
                Self::accumulate(
                    grads,
                    ins[0],
                    g.iter()
                        .zip(x)
                        .map(|(d, v)| if *v >= lo && *v <= hi { *d } else { S::zero() })
                        .collect(),
                );
            }
            Op::SumAll => {
                let d = g[0];
                Self::accumulate(grads, ins[0], vec![d; shp(0).numel()]);
            }
            Op::SumPerExample => {
                let in_shape = shp(0);
                let per = in_shape.per_example();
                let mut contrib = vec![S::zero(); in_shape.numel()];
                for (bi, d) in g.iter().enumerate() {
                    contrib[bi * per..(bi + 1) * per].fill(*d);
                }
                Self::accumulate(grads, ins[0], contrib);
            }
            Op::BroadcastBatch => {
                // out (b, ...) from in (1, ...): gradient sums over the batch
                let per = shp(0).per_example();
                let b = node.shape.batch();
                let mut contrib = vec![S::zero(); per];
                for bi in 0..b {
                    for (c, d) in contrib.iter_mut().zip(&g[bi * per..(bi + 1) * per]) {
                        *c += *d;
                    }
                }
                Self::accumulate(grads, ins[0], contrib);
            }
            Op::Conv2d { stride, pad } => {
                let x_shape = shp(0);
                let k_shape = shp(1);
                let (b, ci) = (x_shape.batch(), x_shape.features());
                let (h, w) = x_shape.hw();
                let co = k_shape.batch();
                let k = k_shape.dims()[2];
                let mut d_in = vec![S::zero(); x_shape.numel()];
                kernels::conv2d_bwd_input(g, val(1), &mut d_in, b, ci, h, w, co, k, *stride, *pad);
                let mut d_kernel = vec![S::zero(); k_shape.numel()];
                let mut d_bias = vec![S::zero(); co];
                kernels::conv2d_bwd_params(g, val(0), &mut d_kernel, &mut d_bias, b, ci, h, w, co, k, *stride, *pad);
                Self::accumulate(grads, ins[0], d_in);
                Self::accumulate(grads, ins[1], d_kernel);
                Self::accumulate(grads, ins[2], d_bias);
            }
            Op::ConvT2d { stride, pad } => {
                let x_shape = shp(0);
                let k_shape = shp(1);
                let (b, ci) = (x_shape.batch(), x_shape.features());
                let (h, w) = x_shape.hw();
                let co = k_shape.batch();
                let k = k_shape.dims()[2];
                let (oh, ow) = node.shape.hw();
                let mut d_in = vec![S::zero(); x_shape.numel()];
                kernels::convt2d_bwd_input(g, val(1), &mut d_in, b, ci, h, w, co, k, *stride, *pad, oh, ow);
                let mut d_kernel = vec![S::zero(); k_shape.numel()];
                let mut d_bias = vec![S::zero(); co];
                kernels::convt2d_bwd_params(
                    g, val(0), &mut d_kernel, &mut d_bias, b, ci, h, w, co, k, *stride, *pad, oh, ow,
                );
                Self::accumulate(grads, ins[0], d_in);
                Self::accumulate(grads, ins[1], d_kernel);
                Self::accumulate(grads, ins[2], d_bias);
            }
            Op::Linear => {
                let x_shape = shp(0);
                let w_shape = shp(1);
                let (b, n) = (x_shape.batch(), x_shape.features());
                let m = w_shape.batch();
                let mut d_x = vec![S::zero(); x_shape.numel()];
                let mut d_w = vec![S::zero(); w_shape.numel()];
                let mut d_b = vec![S::zero(); m];
                kernels::linear_bwd(g, val(0), val(1), &mut d_x, &mut d_w, &mut d_b, b, n, m);
                Self::accumulate(grads, ins[0], d_x);
                Self::accumulate(grads, ins[1], d_w);
                Self::accumulate(grads, ins[2], d_b);
            }
            Op::ConcatFeatures => {
                let out_shape = &node.shape;
                let b = out_shape.batch();
                let trailing: usize = out_shape.dims()[2..].iter().product();
                let out_block = out_shape.features() * trailing;
                let mut offset = 0;
                for j in 0..ins.len() {
                    let in_shape = shp(j);
                    let block = in_shape.features() * trailing;
                    let mut contrib = vec![S::zero(); in_shape.numel()];
                    for bi in 0..b {
                        let src = &g[bi * out_block + offset..bi * out_block + offset + block];
                        contrib[bi * block..(bi + 1) * block].copy_from_slice(src);
                    }
                    offset += block;
                    Self::accumulate(grads, ins[j], contrib);
                }
            }
            Op::SliceFeatures { start } => {
                let in_shape = shp(0);
                let b = in_shape.batch();
                let trailing: usize = in_shape.dims()[2..].iter().product();
                let in_block = in_shape.features() * trailing;
                let out_block = node.shape.features() * trailing;
                let off = start * trailing;
                let mut contrib = vec![S::zero(); in_shape.numel()];
                for bi in 0..b {
                    contrib[bi * in_block + off..bi * in_block + off + out_block]
                        .copy_from_slice(&g[bi * out_block..(bi + 1) * out_block]);
                }
                Self::accumulate(grads, ins[0], contrib);
            }
            Op::Reshape => {
                Self::accumulate(grads, ins[0], g.to_vec());
            }
            Op::RowLogSumExp => {
                // d_x[i, j] = g[i] * softmax(x)[i, j]; out[i] = lse(x[i, :])
                let x = val(0);
                let in_shape = shp(0);
                let (b, k) = (in_shape.batch(), in_shape.features());
                let out = &node.value;
                let mut contrib = vec![S::zero(); x.len()];
                for bi in 0..b {
                    for j in 0..k {
                        contrib[bi * k + j] = g[bi] * (x[bi * k + j] - out[bi]).exp();
                    }
                }
                Self::accumulate(grads, ins[0], contrib);
            }
            Op::RowSoftmax => {
                let y = &node.value;
                let in_shape = shp(0);
                let (b, k) = (in_shape.batch(), in_shape.features());
                let mut contrib = vec![S::zero(); y.len()];
                for bi in 0..b {
                    let row = bi * k..(bi + 1) * k;
                    let mut dot = S::zero();
                    for j in row.clone() {
                        dot += g[j] * y[j];
                    }
                    for j in row {
                        contrib[j] = y[j] * (g[j] - dot);
                    }
                }
                Self::accumulate(grads, ins[0], contrib);
            }
        }
        Ok(())
    }
}
