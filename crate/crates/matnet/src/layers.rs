//! MatNet building blocks: top-down, bottom-up, and merge modules in both
//! convolutional-residual and fully-connected forms, plus the strided
//! connectors that move state between spatial scales.
//!
//! With all kernels and biases zero, every block reduces to a leaky ReLU of
//! its state input and every prior/posterior readout to N(0, 1). That neutral
//! state is the documented initialization sanity condition and is what the
//! zero-parameter tests pin down.

use crate::dist::DiagGaussian;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops::{self, Resample};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Global leaky-ReLU slope. The same slope is used by every block.
pub const LRELU_SLOPE: f64 = 0.1;

/// Convolution parameter pair: kernel (co, ci, k, k) and bias (co).
#[derive(Clone)]
pub struct Conv<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Conv<S> {
    /// He-style init: entries ~ N(0, 2/fan_in), optionally rescaled.
    pub fn kaiming(rng: &Rng, name: &str, co: usize, ci: usize, k: usize, scale: f64) -> Self {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt() * scale;
        let mut r = rng.split_named(name);
        Conv {
            kernel: Tensor::randn(&[co, ci, k, k], std, &mut r),
            bias: Tensor::zeros(&[co]),
        }
    }

    pub fn zeros(co: usize, ci: usize, k: usize) -> Self {
        Conv {
            kernel: Tensor::zeros(&[co, ci, k, k]),
            bias: Tensor::zeros(&[co]),
        }
    }

    pub fn apply(&self, t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::conv2d_same(t, x, &self.kernel, &self.bias)
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Dense parameter pair: weight (m, n) and bias (m).
#[derive(Clone)]
pub struct Dense<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn kaiming(rng: &Rng, name: &str, m: usize, n: usize, scale: f64) -> Self {
        let std = (2.0 / n as f64).sqrt() * scale;
        let mut r = rng.split_named(name);
        Dense {
            weight: Tensor::randn(&[m, n], std, &mut r),
            bias: Tensor::zeros(&[m]),
        }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[m, n]),
            bias: Tensor::zeros(&[m]),
        }
    }

    pub fn apply(&self, t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::linear(t, x, &self.weight, &self.bias)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Two-conv readout emitting stacked (mean, log-variance) feature maps.
#[derive(Clone)]
pub struct PriorReadoutConv<S: Scalar> {
    pub hidden: Conv<S>,
    pub out: Conv<S>,
    pub latent_channels: usize,
}

impl<S: Scalar> PriorReadoutConv<S> {
    fn new(rng: &Rng, name: &str, state_c: usize, latent_c: usize, k: usize) -> Self {
        PriorReadoutConv {
            hidden: Conv::kaiming(rng, &format!("{name}.hidden"), state_c, state_c, k, 1.0),
            // zero output conv: initial distributions are exactly N(0, 1)
            out: Conv::zeros(2 * latent_c, state_c, k),
            latent_channels: latent_c,
        }
    }

    fn apply(&self, t: &mut Tape<S>, h: &Tensor<S>) -> Result<DiagGaussian<S>> {
        let a = self.hidden.apply(t, h)?;
        let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
        let raw = self.out.apply(t, &a)?;
        split_gaussian(t, &raw, self.latent_channels)
    }
}

/// Split stacked (mean, log-variance) maps into a clamped Gaussian.
pub fn split_gaussian<S: Scalar>(t: &mut Tape<S>, raw: &Tensor<S>, latent: usize) -> Result<DiagGaussian<S>> {
    if raw.shape().features() != 2 * latent {
        return Err(Error::shape(
            "split_gaussian",
            format!("{} feature maps", 2 * latent),
            raw.shape().to_string(),
        ));
    }
    let mu = ops::slice_features(t, raw, 0, latent)?;
    let log_var = ops::slice_features(t, raw, latent, latent)?;
    DiagGaussian::new(t, mu, log_var)
}

// ---------------------------------------------------------------------------
// Top-down modules
// ---------------------------------------------------------------------------

/// Convolutional TD module: residual update gated by latent variables,
/// h' = lrelu(h + conv(lrelu(conv([h; z], v)), w)), plus the prior readout
/// over its own state. The prior readout has its own parameters; sharing them
/// with the state update would force incompatible shapes.
#[derive(Clone)]
pub struct TdConv<S: Scalar> {
    pub conv1: Conv<S>,
    pub conv2: Conv<S>,
    pub prior: PriorReadoutConv<S>,
    pub latent_channels: usize,
}

impl<S: Scalar> TdConv<S> {
    pub fn new(rng: &Rng, name: &str, state_c: usize, latent_c: usize, k: usize) -> Self {
        TdConv {
            conv1: Conv::kaiming(rng, &format!("{name}.conv1"), state_c, state_c + latent_c, k, 1.0),
            conv2: Conv::kaiming(rng, &format!("{name}.conv2"), state_c, state_c, k, 0.5),
            prior: PriorReadoutConv::new(rng, &format!("{name}.prior"), state_c, latent_c, k),
            latent_channels: latent_c,
        }
    }

    pub fn zeros(state_c: usize, latent_c: usize, k: usize) -> Self {
        TdConv {
            conv1: Conv::zeros(state_c, state_c + latent_c, k),
            conv2: Conv::zeros(state_c, state_c, k),
            prior: PriorReadoutConv {
                hidden: Conv::zeros(state_c, state_c, k),
                out: Conv::zeros(2 * latent_c, state_c, k),
                latent_channels: latent_c,
            },
            latent_channels: latent_c,
        }
    }

    pub fn forward(&self, t: &mut Tape<S>, h: &Tensor<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        if z.shape().batch() != h.shape().batch() || z.dims()[2..] != h.dims()[2..] {
            return Err(Error::shape("td_forward", h.shape().to_string(), z.shape().to_string()));
        }
        let cat = ops::concat_features(t, &[h, z])?;
        let a = self.conv1.apply(t, &cat)?;
        let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
        let b = self.conv2.apply(t, &a)?;
        let res = ops::add(t, h, &b)?;
        ops::lrelu(t, &res, LRELU_SLOPE)
    }

    pub fn prior(&self, t: &mut Tape<S>, h: &Tensor<S>) -> Result<DiagGaussian<S>> {
        self.prior.apply(t, h)
    }
}

/// Fully-connected TD module with a stochastic GRU-style state update:
/// r, u = logistic(W_g [h; z]); c = tanh(W_c [r*h; z]); h' = u*h + (1-u)*c.
#[derive(Clone)]
pub struct TdGru<S: Scalar> {
    pub gates: Dense<S>,
    pub candidate: Dense<S>,
    pub prior_hidden: Dense<S>,
    pub prior_out: Dense<S>,
    pub latent_dim: usize,
}

impl<S: Scalar> TdGru<S> {
    pub fn new(rng: &Rng, name: &str, width: usize, latent: usize) -> Self {
        let mut gates = Dense::kaiming(rng, &format!("{name}.gates"), 2 * width, width + latent, 1.0);
        // start near the identity: +1 bias on the update gate half
        let mut bias = gates.bias.data().to_vec();
        for v in bias.iter_mut().take(2 * width).skip(width) {
            *v = S::one();
        }
        gates.bias = Tensor::from_vec(bias, &[2 * width]);
        TdGru {
            gates,
            candidate: Dense::kaiming(rng, &format!("{name}.candidate"), width, width + latent, 1.0),
            prior_hidden: Dense::kaiming(rng, &format!("{name}.prior_hidden"), width, width, 1.0),
            prior_out: Dense::zeros(2 * latent, width),
            latent_dim: latent,
        }
    }

    pub fn zeros(width: usize, latent: usize) -> Self {
        TdGru {
            gates: Dense::zeros(2 * width, width + latent),
            candidate: Dense::zeros(width, width + latent),
            prior_hidden: Dense::zeros(width, width),
            prior_out: Dense::zeros(2 * latent, width),
            latent_dim: latent,
        }
    }

    pub fn forward(&self, t: &mut Tape<S>, h: &Tensor<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        if h.shape().rank() != 2 || z.shape().rank() != 2 {
            return Err(Error::invalid("gru_td_forward", "GRU update applies only at the FC scale"));
        }
        let n = h.shape().features();
        let cat = ops::concat_features(t, &[h, z])?;
        let g = self.gates.apply(t, &cat)?;
        let g = ops::sigmoid(t, &g)?;
        let r = ops::slice_features(t, &g, 0, n)?;
        let u = ops::slice_features(t, &g, n, n)?;
        let rh = ops::mul(t, &r, h)?;
        let cat2 = ops::concat_features(t, &[&rh, z])?;
        let c = self.candidate.apply(t, &cat2)?;
        let c = ops::tanh(t, &c)?;
        let uh = ops::mul(t, &u, h)?;
        let one_minus_u = {
            let nu = ops::neg(t, &u)?;
            ops::add_scalar(t, &nu, 1.0)?
        };
        let uc = ops::mul(t, &one_minus_u, &c)?;
        ops::add(t, &uh, &uc)
    }

    pub fn prior(&self, t: &mut Tape<S>, h: &Tensor<S>) -> Result<DiagGaussian<S>> {
        let a = self.prior_hidden.apply(t, h)?;
        let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
        let raw = self.prior_out.apply(t, &a)?;
        split_gaussian(t, &raw, self.latent_dim)
    }
}

/// Top-down module at one spatial scale or the FC scale.
#[derive(Clone)]
pub enum TdModule<S: Scalar> {
    Conv(TdConv<S>),
    Fc(TdGru<S>),
}

impl<S: Scalar> TdModule<S> {
    pub fn forward(&self, t: &mut Tape<S>, h: &Tensor<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            TdModule::Conv(m) => m.forward(t, h, z),
            TdModule::Fc(m) => m.forward(t, h, z),
        }
    }

    pub fn prior(&self, t: &mut Tape<S>, h: &Tensor<S>) -> Result<DiagGaussian<S>> {
        match self {
            TdModule::Conv(m) => m.prior(t, h),
            TdModule::Fc(m) => m.prior(t, h),
        }
    }

    /// Latent shape for a given state tensor.
    pub fn latent_dims(&self, state: &Tensor<S>) -> Vec<usize> {
        match self {
            TdModule::Conv(m) => {
                let d = state.dims();
                vec![d[0], m.latent_channels, d[2], d[3]]
            }
            TdModule::Fc(m) => vec![state.dims()[0], m.latent_dim],
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        match self {
            TdModule::Conv(m) => {
                m.conv1.visit(&format!("{prefix}.conv1"), f);
                m.conv2.visit(&format!("{prefix}.conv2"), f);
                m.prior.hidden.visit(&format!("{prefix}.prior.hidden"), f);
                m.prior.out.visit(&format!("{prefix}.prior.out"), f);
            }
            TdModule::Fc(m) => {
                m.gates.visit(&format!("{prefix}.gates"), f);
                m.candidate.visit(&format!("{prefix}.candidate"), f);
                m.prior_hidden.visit(&format!("{prefix}.prior_hidden"), f);
                m.prior_out.visit(&format!("{prefix}.prior_out"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        match self {
            TdModule::Conv(m) => {
                m.conv1.visit_mut(&format!("{prefix}.conv1"), f);
                m.conv2.visit_mut(&format!("{prefix}.conv2"), f);
                m.prior.hidden.visit_mut(&format!("{prefix}.prior.hidden"), f);
                m.prior.out.visit_mut(&format!("{prefix}.prior.out"), f);
            }
            TdModule::Fc(m) => {
                m.gates.visit_mut(&format!("{prefix}.gates"), f);
                m.candidate.visit_mut(&format!("{prefix}.candidate"), f);
                m.prior_hidden.visit_mut(&format!("{prefix}.prior_hidden"), f);
                m.prior_out.visit_mut(&format!("{prefix}.prior_out"), f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bottom-up modules
// ---------------------------------------------------------------------------

/// Bottom-up module: plain residual update, no latent input.
#[derive(Clone)]
pub enum BuModule<S: Scalar> {
    Conv { conv1: Conv<S>, conv2: Conv<S> },
    Fc { fc1: Dense<S>, fc2: Dense<S> },
}

impl<S: Scalar> BuModule<S> {
    pub fn new_conv(rng: &Rng, name: &str, state_c: usize, k: usize) -> Self {
        BuModule::Conv {
            conv1: Conv::kaiming(rng, &format!("{name}.conv1"), state_c, state_c, k, 1.0),
            conv2: Conv::kaiming(rng, &format!("{name}.conv2"), state_c, state_c, k, 0.5),
        }
    }

    pub fn new_fc(rng: &Rng, name: &str, width: usize) -> Self {
        BuModule::Fc {
            fc1: Dense::kaiming(rng, &format!("{name}.fc1"), width, width, 1.0),
            fc2: Dense::kaiming(rng, &format!("{name}.fc2"), width, width, 0.5),
        }
    }

    pub fn zeros_conv(state_c: usize, k: usize) -> Self {
        BuModule::Conv {
            conv1: Conv::zeros(state_c, state_c, k),
            conv2: Conv::zeros(state_c, state_c, k),
        }
    }

    pub fn zeros_fc(width: usize) -> Self {
        BuModule::Fc {
            fc1: Dense::zeros(width, width),
            fc2: Dense::zeros(width, width),
        }
    }

    pub fn forward(&self, t: &mut Tape<S>, h: &Tensor<S>) -> Result<Tensor<S>> {
        let branch = match self {
            BuModule::Conv { conv1, conv2 } => {
                let a = conv1.apply(t, h)?;
                let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
                conv2.apply(t, &a)?
            }
            BuModule::Fc { fc1, fc2 } => {
                let a = fc1.apply(t, h)?;
                let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
                fc2.apply(t, &a)?
            }
        };
        let res = ops::add(t, h, &branch)?;
        ops::lrelu(t, &res, LRELU_SLOPE)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        match self {
            BuModule::Conv { conv1, conv2 } => {
                conv1.visit(&format!("{prefix}.conv1"), f);
                conv2.visit(&format!("{prefix}.conv2"), f);
            }
            BuModule::Fc { fc1, fc2 } => {
                fc1.visit(&format!("{prefix}.fc1"), f);
                fc2.visit(&format!("{prefix}.fc2"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        match self {
            BuModule::Conv { conv1, conv2 } => {
                conv1.visit_mut(&format!("{prefix}.conv1"), f);
                conv2.visit_mut(&format!("{prefix}.conv2"), f);
            }
            BuModule::Fc { fc1, fc2 } => {
                fc1.visit_mut(&format!("{prefix}.fc1"), f);
                fc2.visit_mut(&format!("{prefix}.fc2"), f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Merge modules
// ---------------------------------------------------------------------------

/// Merge module: stacks merge, BU, and TD states, applies a residual update
/// to the merge state, and reads out the latent posterior with a single
/// linear convolution of the updated state.
#[derive(Clone)]
pub enum MergeModule<S: Scalar> {
    Conv {
        conv1: Conv<S>,
        conv2: Conv<S>,
        readout: Conv<S>,
        latent_channels: usize,
    },
    Fc {
        fc1: Dense<S>,
        fc2: Dense<S>,
        readout: Dense<S>,
        latent_dim: usize,
    },
}

impl<S: Scalar> MergeModule<S> {
    pub fn new_conv(rng: &Rng, name: &str, merge_c: usize, bu_c: usize, td_c: usize, latent_c: usize, k: usize) -> Self {
        MergeModule::Conv {
            conv1: Conv::kaiming(rng, &format!("{name}.conv1"), merge_c, merge_c + bu_c + td_c, k, 1.0),
            conv2: Conv::kaiming(rng, &format!("{name}.conv2"), merge_c, merge_c, k, 0.5),
            readout: Conv::zeros(2 * latent_c, merge_c, k),
            latent_channels: latent_c,
        }
    }

    pub fn new_fc(rng: &Rng, name: &str, merge_n: usize, bu_n: usize, td_n: usize, latent: usize) -> Self {
        MergeModule::Fc {
            fc1: Dense::kaiming(rng, &format!("{name}.fc1"), merge_n, merge_n + bu_n + td_n, 1.0),
            fc2: Dense::kaiming(rng, &format!("{name}.fc2"), merge_n, merge_n, 0.5),
            readout: Dense::zeros(2 * latent, merge_n),
            latent_dim: latent,
        }
    }

    pub fn zeros_conv(merge_c: usize, bu_c: usize, td_c: usize, latent_c: usize, k: usize) -> Self {
        MergeModule::Conv {
            conv1: Conv::zeros(merge_c, merge_c + bu_c + td_c, k),
            conv2: Conv::zeros(merge_c, merge_c, k),
            readout: Conv::zeros(2 * latent_c, merge_c, k),
            latent_channels: latent_c,
        }
    }

    pub fn zeros_fc(merge_n: usize, bu_n: usize, td_n: usize, latent: usize) -> Self {
        MergeModule::Fc {
            fc1: Dense::zeros(merge_n, merge_n + bu_n + td_n),
            fc2: Dense::zeros(merge_n, merge_n),
            readout: Dense::zeros(2 * latent, merge_n),
            latent_dim: latent,
        }
    }

    /// Returns the latent posterior and the updated merge state.
    pub fn forward(
        &self,
        t: &mut Tape<S>,
        h_m: &Tensor<S>,
        h_b: &Tensor<S>,
        h_t: &Tensor<S>,
    ) -> Result<(DiagGaussian<S>, Tensor<S>)> {
        if h_b.shape().batch() != h_m.shape().batch()
            || h_t.shape().batch() != h_m.shape().batch()
            || h_b.dims()[2..] != h_m.dims()[2..]
            || h_t.dims()[2..] != h_m.dims()[2..]
        {
            return Err(Error::shape(
                "merge_forward",
                h_m.shape().to_string(),
                format!("bu {} / td {}", h_b.shape(), h_t.shape()),
            ));
        }
        let cat = ops::concat_features(t, &[h_m, h_b, h_t])?;
        match self {
            MergeModule::Conv { conv1, conv2, readout, latent_channels } => {
                let a = conv1.apply(t, &cat)?;
                let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
                let b = conv2.apply(t, &a)?;
                let res = ops::add(t, h_m, &b)?;
                let h_m_next = ops::lrelu(t, &res, LRELU_SLOPE)?;
                let raw = readout.apply(t, &h_m_next)?;
                let q = split_gaussian(t, &raw, *latent_channels)?;
                Ok((q, h_m_next))
            }
            MergeModule::Fc { fc1, fc2, readout, latent_dim } => {
                let a = fc1.apply(t, &cat)?;
                let a = ops::lrelu(t, &a, LRELU_SLOPE)?;
                let b = fc2.apply(t, &a)?;
                let res = ops::add(t, h_m, &b)?;
                let h_m_next = ops::lrelu(t, &res, LRELU_SLOPE)?;
                let raw = readout.apply(t, &h_m_next)?;
                let q = split_gaussian(t, &raw, *latent_dim)?;
                Ok((q, h_m_next))
            }
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        match self {
            MergeModule::Conv { conv1, conv2, readout, .. } => {
                conv1.visit(&format!("{prefix}.conv1"), f);
                conv2.visit(&format!("{prefix}.conv2"), f);
                readout.visit(&format!("{prefix}.readout"), f);
            }
            MergeModule::Fc { fc1, fc2, readout, .. } => {
                fc1.visit(&format!("{prefix}.fc1"), f);
                fc2.visit(&format!("{prefix}.fc2"), f);
                readout.visit(&format!("{prefix}.readout"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        match self {
            MergeModule::Conv { conv1, conv2, readout, .. } => {
                conv1.visit_mut(&format!("{prefix}.conv1"), f);
                conv2.visit_mut(&format!("{prefix}.conv2"), f);
                readout.visit_mut(&format!("{prefix}.readout"), f);
            }
            MergeModule::Fc { fc1, fc2, readout, .. } => {
                fc1.visit_mut(&format!("{prefix}.fc1"), f);
                fc2.visit_mut(&format!("{prefix}.fc2"), f);
                readout.visit_mut(&format!("{prefix}.readout"), f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scale connectors
// ---------------------------------------------------------------------------

/// Connector between meta-modules. Each connector owns a leaky ReLU applied
/// after resampling.
#[derive(Clone)]
pub enum Connector<S: Scalar> {
    /// Stride-2 convolution halving the spatial dims.
    Down(Conv<S>),
    /// Transposed stride-2 convolution doubling the spatial dims.
    Up(Conv<S>),
    /// Flatten (b,c,s,s) and project to (b,n).
    SpatialToFc(Dense<S>),
    /// Project (b,n) and reshape to (b,c,h,w).
    FcToSpatial { dense: Dense<S>, channels: usize, h: usize, w: usize },
}

impl<S: Scalar> Connector<S> {
    pub fn apply(&self, t: &mut Tape<S>, h: &Tensor<S>) -> Result<Tensor<S>> {
        let resampled = match self {
            Connector::Down(c) => ops::strided_resample(t, h, Resample::Down, &c.kernel, &c.bias)?,
            Connector::Up(c) => ops::strided_resample(t, h, Resample::Up, &c.kernel, &c.bias)?,
            Connector::SpatialToFc(d) => {
                let b = h.shape().batch();
                let flat = ops::reshape(t, h, &[b, h.shape().per_example()])?;
                d.apply(t, &flat)?
            }
            Connector::FcToSpatial { dense, channels, h: oh, w: ow } => {
                let b = h.shape().batch();
                let proj = dense.apply(t, h)?;
                ops::reshape(t, &proj, &[b, *channels, *oh, *ow])?
            }
        };
        ops::lrelu(t, &resampled, LRELU_SLOPE)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        match self {
            Connector::Down(c) | Connector::Up(c) => c.visit(prefix, f),
            Connector::SpatialToFc(d) | Connector::FcToSpatial { dense: d, .. } => d.visit(prefix, f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        match self {
            Connector::Down(c) | Connector::Up(c) => c.visit_mut(prefix, f),
            Connector::SpatialToFc(d) | Connector::FcToSpatial { dense: d, .. } => d.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::GradCheck;

    type T64 = Tensor<f64>;

    fn randn(dims: &[usize], std: f64, rng: &mut Rng) -> T64 {
        Tensor::randn(dims, std, rng)
    }

    #[test]
    fn zeroed_td_module_is_lrelu_of_state() {
        let mut t = Tape::new();
        let m = TdConv::<f64>::zeros(3, 2, 3);
        let mut rng = Rng::new(1, 0);
        let h = randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let z = randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let out = m.forward(&mut t, &h, &z).unwrap();
        let expect: Vec<f64> = h.data().iter().map(|v| if *v >= 0.0 { *v } else { 0.1 * v }).collect();
        assert_eq!(out.data(), &expect[..]);

        // nonnegative state passes through untouched
        let h_pos = T64::from_vec(h.data().iter().map(|v| v.abs()).collect(), h.dims());
        let out = m.forward(&mut t, &h_pos, &z).unwrap();
        assert_eq!(out.data(), h_pos.data());
    }

    #[test]
    fn zeroed_td_prior_is_standard_normal() {
        let mut t = Tape::new();
        let m = TdConv::<f64>::zeros(3, 2, 3);
        let h = T64::full(&[1, 3, 4, 4], 0.7);
        let p = m.prior(&mut t, &h).unwrap();
        assert!(p.mu().data().iter().all(|v| *v == 0.0));
        assert!(p.log_var().data().iter().all(|v| *v == 0.0));
        assert_eq!(p.mu().dims(), &[1, 2, 4, 4]);
    }

    #[test]
    fn td_forward_gradients_and_latent_gating() {
        let mut rng = Rng::new(7, 0);
        let m_rng = Rng::new(99, 0);
        let m = TdConv::<f64>::new(&m_rng, "td", 2, 2, 3);
        let h = randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let z = randn(&[1, 2, 3, 3], 1.0, &mut rng);

        let gc = GradCheck::default();
        let inputs = [
            &h,
            &z,
            &m.conv1.kernel,
            &m.conv1.bias,
            &m.conv2.kernel,
            &m.conv2.bias,
        ];
        let worst = gc
            .run(&inputs, |t, ins| {
                let module = TdConv {
                    conv1: Conv { kernel: ins[2].clone(), bias: ins[3].clone() },
                    conv2: Conv { kernel: ins[4].clone(), bias: ins[5].clone() },
                    prior: m.prior.clone(),
                    latent_channels: 2,
                };
                let out = module.forward(t, &ins[0], &ins[1]).unwrap();
                let sq = ops::mul(t, &out, &out).unwrap();
                ops::sum_all(t, &sq).unwrap()
            })
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");

        // latent gating: dL/dz is not identically zero for random kernels
        let mut t = Tape::new();
        let out = m.forward(&mut t, &h, &z).unwrap();
        let s = ops::sum_all(&mut t, &out).unwrap();
        let grads = t.backward(&s).unwrap();
        let gz = grads.wrt(&z);
        assert!(gz.data().iter().any(|v| v.abs() > 1e-8), "z must gate the state");
    }

    #[test]
    fn td_prior_gradcheck_on_readout_params() {
        let m_rng = Rng::new(5, 0);
        let m = TdConv::<f64>::new(&m_rng, "td", 2, 1, 3);
        let mut rng = Rng::new(8, 0);
        let h = randn(&[1, 2, 3, 3], 1.0, &mut rng);
        // randomize the zero-initialized output readout for the check
        let out_conv = Conv {
            kernel: randn(&[2, 2, 3, 3], 0.4, &mut rng),
            bias: randn(&[2], 0.2, &mut rng),
        };
        let gc = GradCheck::default();
        let worst = gc
            .run(
                &[&h, &m.prior.hidden.kernel, &out_conv.kernel, &out_conv.bias],
                |t, ins| {
                    let pr = PriorReadoutConv {
                        hidden: Conv { kernel: ins[1].clone(), bias: m.prior.hidden.bias.clone() },
                        out: Conv { kernel: ins[2].clone(), bias: ins[3].clone() },
                        latent_channels: 1,
                    };
                    let g = pr.apply(t, &ins[0]).unwrap();
                    let a = ops::sum_all(t, g.mu()).unwrap();
                    let b = ops::sum_all(t, g.log_var()).unwrap();
                    let b2 = ops::mul(t, &b, &b).unwrap();
                    ops::add(t, &a, &b2).unwrap()
                },
            )
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn zeroed_bu_module_is_lrelu() {
        let mut t = Tape::new();
        let m = BuModule::<f64>::zeros_conv(3, 3);
        let mut rng = Rng::new(2, 0);
        let h = randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let out = m.forward(&mut t, &h).unwrap();
        let expect: Vec<f64> = h.data().iter().map(|v| if *v >= 0.0 { *v } else { 0.1 * v }).collect();
        assert_eq!(out.data(), &expect[..]);
        assert_eq!(out.dims(), h.dims());
    }

    #[test]
    fn bu_forward_gradcheck() {
        let m_rng = Rng::new(55, 0);
        let m = BuModule::<f64>::new_conv(&m_rng, "bu", 2, 3);
        let (c1, c2) = match &m {
            BuModule::Conv { conv1, conv2 } => (conv1.clone(), conv2.clone()),
            _ => unreachable!(),
        };
        let mut rng = Rng::new(3, 0);
        let h = randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let gc = GradCheck::default();
        let worst = gc
            .run(&[&h, &c1.kernel, &c2.kernel], |t, ins| {
                let module = BuModule::Conv {
                    conv1: Conv { kernel: ins[1].clone(), bias: c1.bias.clone() },
                    conv2: Conv { kernel: ins[2].clone(), bias: c2.bias.clone() },
                };
                let out = module.forward(t, &ins[0]).unwrap();
                let sq = ops::mul(t, &out, &out).unwrap();
                ops::sum_all(t, &sq).unwrap()
            })
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn zeroed_merge_gives_standard_posterior() {
        let mut t = Tape::new();
        let m = MergeModule::<f64>::zeros_conv(2, 3, 3, 2, 3);
        let mut rng = Rng::new(4, 0);
        let h_m = randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let h_b = randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let h_t = randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let (q, h_m2) = m.forward(&mut t, &h_m, &h_b, &h_t).unwrap();
        assert!(q.mu().data().iter().all(|v| *v == 0.0));
        assert!(q.log_var().data().iter().all(|v| *v == 0.0));
        assert_eq!(q.mu().shape().features(), 2);
        let expect: Vec<f64> = h_m.data().iter().map(|v| if *v >= 0.0 { *v } else { 0.1 * v }).collect();
        assert_eq!(h_m2.data(), &expect[..]);
    }

    #[test]
    fn merge_gradient_reaches_all_three_states() {
        let m_rng = Rng::new(66, 0);
        let m = MergeModule::<f64>::new_conv(&m_rng, "merge", 2, 2, 2, 1, 3);
        // randomize the readout so posterior params depend on the states
        let m = match m {
            MergeModule::Conv { conv1, conv2, latent_channels, .. } => {
                let mut r = Rng::new(77, 0);
                MergeModule::Conv {
                    conv1,
                    conv2,
                    readout: Conv { kernel: randn(&[2, 2, 3, 3], 0.4, &mut r), bias: Tensor::zeros(&[2]) },
                    latent_channels,
                }
            }
            other => other,
        };
        let mut rng = Rng::new(5, 0);
        let h_m = randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let h_b = randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let h_t = randn(&[1, 2, 3, 3], 1.0, &mut rng);

        let gc = GradCheck::default();
        let worst = gc
            .run(&[&h_m, &h_b, &h_t], |t, ins| {
                let (q, h_m2) = m.forward(t, &ins[0], &ins[1], &ins[2]).unwrap();
                let a = ops::sum_all(t, q.mu()).unwrap();
                let b = ops::sum_all(t, &h_m2).unwrap();
                let c = ops::sum_all(t, q.log_var()).unwrap();
                let ab = ops::add(t, &a, &b).unwrap();
                ops::add(t, &ab, &c).unwrap()
            })
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");

        let mut t = Tape::new();
        let (q, _) = m.forward(&mut t, &h_m, &h_b, &h_t).unwrap();
        let s = ops::sum_all(&mut t, q.mu()).unwrap();
        let grads = t.backward(&s).unwrap();
        for (name, state) in [("h_m", &h_m), ("h_b", &h_b), ("h_t", &h_t)] {
            let g = grads.wrt(state);
            assert!(g.data().iter().any(|v| v.abs() > 1e-10), "no gradient into {name}");
        }
    }

    #[test]
    fn gru_gate_saturations() {
        let width = 3;
        let latent = 2;
        let mut m = TdGru::<f64>::zeros(width, latent);
        let mut rng = Rng::new(6, 0);
        let h = randn(&[2, width], 1.0, &mut rng);
        let z = randn(&[2, latent], 1.0, &mut rng);

        // update gate forced to 1: output = h
        let mut bias = vec![0.0; 2 * width];
        bias[width..].fill(50.0);
        m.gates.bias = T64::from_vec(bias, &[2 * width]);
        let mut t = Tape::new();
        let out = m.forward(&mut t, &h, &z).unwrap();
        for (o, hv) in out.data().iter().zip(h.data()) {
            assert!((o - hv).abs() < 1e-9);
        }

        // update gate forced to 0: output = candidate = tanh(0) = 0 here
        let mut bias = vec![0.0; 2 * width];
        bias[width..].fill(-50.0);
        m.gates.bias = T64::from_vec(bias, &[2 * width]);
        let out = m.forward(&mut t, &h, &z).unwrap();
        for o in out.data() {
            assert!(o.abs() < 1e-9);
        }
    }

    #[test]
    fn gru_gradcheck_over_gate_params() {
        let m_rng = Rng::new(88, 0);
        let m = TdGru::<f64>::new(&m_rng, "gru", 3, 2);
        let mut rng = Rng::new(9, 0);
        let h = randn(&[2, 3], 1.0, &mut rng);
        let z = randn(&[2, 2], 1.0, &mut rng);
        let gc = GradCheck::default();
        let worst = gc
            .run(
                &[&h, &z, &m.gates.weight, &m.gates.bias, &m.candidate.weight, &m.candidate.bias],
                |t, ins| {
                    let module = TdGru {
                        gates: Dense { weight: ins[2].clone(), bias: ins[3].clone() },
                        candidate: Dense { weight: ins[4].clone(), bias: ins[5].clone() },
                        prior_hidden: m.prior_hidden.clone(),
                        prior_out: m.prior_out.clone(),
                        latent_dim: 2,
                    };
                    let out = module.forward(t, &ins[0], &ins[1]).unwrap();
                    let sq = ops::mul(t, &out, &out).unwrap();
                    ops::sum_all(t, &sq).unwrap()
                },
            )
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn gru_rejects_spatial_input() {
        let m = TdGru::<f64>::zeros(3, 2);
        let mut t = Tape::new();
        let h = T64::zeros(&[1, 3, 2, 2]);
        let z = T64::zeros(&[1, 2, 2, 2]);
        assert!(m.forward(&mut t, &h, &z).is_err());
    }

    #[test]
    fn connectors_shape_contracts() {
        let rng = Rng::new(10, 0);
        let mut t = Tape::new();
        // 14x14 -> 7x7 down connector halves spatial dims
        let down = Connector::Down(Conv::<f64>::kaiming(&rng, "down", 4, 3, 3, 1.0));
        let x = T64::zeros(&[2, 3, 14, 14]);
        let y = down.apply(&mut t, &x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 7, 7]);

        let up = Connector::Up(Conv::<f64>::kaiming(&rng, "up", 3, 4, 3, 1.0));
        let z = up.apply(&mut t, &y).unwrap();
        assert_eq!(z.dims(), &[2, 3, 14, 14]);

        // fc -> spatial reshapes (b, n) to (b, c, s, s)
        let to_spatial = Connector::FcToSpatial {
            dense: Dense::<f64>::kaiming(&rng, "tospatial", 2 * 4 * 4, 10, 1.0),
            channels: 2,
            h: 4,
            w: 4,
        };
        let v = T64::zeros(&[3, 10]);
        let s = to_spatial.apply(&mut t, &v).unwrap();
        assert_eq!(s.dims(), &[3, 2, 4, 4]);

        let to_fc = Connector::SpatialToFc(Dense::<f64>::kaiming(&rng, "tofc", 10, 2 * 4 * 4, 1.0));
        let f = to_fc.apply(&mut t, &s).unwrap();
        assert_eq!(f.dims(), &[3, 10]);
    }

    #[test]
    fn connector_gradcheck() {
        let rng = Rng::new(11, 0);
        let mut data_rng = Rng::new(12, 0);
        let conv = Conv::<f64>::kaiming(&rng, "c", 2, 2, 3, 1.0);
        let x = randn(&[1, 2, 4, 4], 1.0, &mut data_rng);
        let gc = GradCheck::default();
        let worst = gc
            .run(&[&x, &conv.kernel, &conv.bias], |t, ins| {
                let c = Connector::Down(Conv { kernel: ins[1].clone(), bias: ins[2].clone() });
                let y = c.apply(t, &ins[0]).unwrap();
                let sq = ops::mul(t, &y, &y).unwrap();
                ops::sum_all(t, &sq).unwrap()
            })
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }
}
