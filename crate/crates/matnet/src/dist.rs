//! Probability primitives: reparametrized diagonal Gaussians, closed-form and
//! approximate KL divergences, output likelihoods, and the multi-sample
//! importance-weighted bound.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Log-variance clamp applied at construction.
pub const LOG_VAR_MIN: f64 = -6.0;
pub const LOG_VAR_MAX: f64 = 3.0;

/// Probability floor applied before any log.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian with tape-tracked parameters. `log_var` is clamped to
/// [LOG_VAR_MIN, LOG_VAR_MAX] when constructed.
#[derive(Clone)]
pub struct DiagGaussian<S: Scalar> {
    mu: Tensor<S>,
    log_var: Tensor<S>,
}

impl<S: Scalar> DiagGaussian<S> {
    pub fn new(t: &mut Tape<S>, mu: Tensor<S>, log_var: Tensor<S>) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::shape("DiagGaussian", mu.shape().to_string(), log_var.shape().to_string()));
        }
        let log_var = ops::clamp(t, &log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(DiagGaussian { mu, log_var })
    }

    /// Standard normal N(0, I) of the given shape.
    pub fn standard(dims: &[usize]) -> Self {
        DiagGaussian {
            mu: Tensor::zeros(dims),
            log_var: Tensor::zeros(dims),
        }
    }

    /// Wrap stored parameters without recording a clamp. Used for parameter
    /// storage (mixture components); clamping happens when the component is
    /// broadcast for use.
    pub fn raw(mu: Tensor<S>, log_var: Tensor<S>) -> Self {
        assert_eq!(mu.dims(), log_var.dims());
        DiagGaussian { mu, log_var }
    }

    pub fn mu(&self) -> &Tensor<S> {
        &self.mu
    }

    pub fn log_var(&self) -> &Tensor<S> {
        &self.log_var
    }

    pub fn mu_mut(&mut self) -> &mut Tensor<S> {
        &mut self.mu
    }

    pub fn log_var_mut(&mut self) -> &mut Tensor<S> {
        &mut self.log_var
    }

    pub fn dims(&self) -> &[usize] {
        self.mu.dims()
    }

    /// Detached copy (used to freeze one side of a computation).
    pub fn detach(&self) -> Self {
        DiagGaussian {
            mu: self.mu.detach(),
            log_var: self.log_var.detach(),
        }
    }
}

/// Uniform-weight Gaussian mixture over the top latent variables. Component
/// parameters are stored with a leading batch dim of 1 and broadcast on use.
#[derive(Clone)]
pub struct MixturePrior<S: Scalar> {
    components: Vec<DiagGaussian<S>>,
}

impl<S: Scalar> MixturePrior<S> {
    pub fn new(components: Vec<DiagGaussian<S>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("MixturePrior", "empty mixture"));
        }
        let d0 = components[0].dims().to_vec();
        for c in &components {
            if c.dims() != d0 {
                return Err(Error::shape("MixturePrior", format!("{d0:?}"), format!("{:?}", c.dims())));
            }
        }
        Ok(MixturePrior { components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[DiagGaussian<S>] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [DiagGaussian<S>] {
        &mut self.components
    }

    /// Broadcast component `i` across a batch, clamping its log-variance.
    pub fn component_for_batch(&self, t: &mut Tape<S>, i: usize, b: usize) -> Result<DiagGaussian<S>> {
        let mu = ops::broadcast_batch(t, &self.components[i].mu, b)?;
        let log_var = ops::broadcast_batch(t, &self.components[i].log_var, b)?;
        DiagGaussian::new(t, mu, log_var)
    }
}

/// Draw standard-normal noise of a given shape.
pub fn draw_eps<S: Scalar>(dims: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::randn(dims, 1.0, rng)
}

/// z = mu + exp(log_var / 2) * eps. Gradients flow to mu and log_var; eps is
/// treated as exogenous noise.
pub fn reparam_sample<S: Scalar>(t: &mut Tape<S>, q: &DiagGaussian<S>, eps: &Tensor<S>) -> Result<Tensor<S>> {
    if eps.shape() != q.mu.shape() {
        return Err(Error::shape("reparam_sample", q.mu.shape().to_string(), eps.shape().to_string()));
    }
    let half_lv = ops::scale(t, &q.log_var, 0.5)?;
    let sigma = ops::exp(t, &half_lv)?;
    let noise = ops::mul(t, &sigma, &eps.detach())?;
    ops::add(t, &q.mu, &noise)
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over latent
/// dims: per-example tensor of shape (b).
pub fn kl_diag_gauss<S: Scalar>(t: &mut Tape<S>, q: &DiagGaussian<S>, p: &DiagGaussian<S>) -> Result<Tensor<S>> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::shape("kl_diag_gauss", q.mu.shape().to_string(), p.mu.shape().to_string()));
    }
    // 1/2 [ exp(lq - lp) + (mq - mp)^2 exp(-lp) - 1 + lp - lq ]
    let lq_lp = ops::sub(t, &q.log_var, &p.log_var)?;
    let var_ratio = ops::exp(t, &lq_lp)?;
    let dmu = ops::sub(t, &q.mu, &p.mu)?;
    let dmu2 = ops::mul(t, &dmu, &dmu)?;
    let inv_vp = {
        let neg_lp = ops::neg(t, &p.log_var)?;
        ops::exp(t, &neg_lp)?
    };
    let maha = ops::mul(t, &dmu2, &inv_vp)?;
    let a = ops::add(t, &var_ratio, &maha)?;
    let b = ops::sub(t, &a, &lq_lp)?;
    let c = ops::add_scalar(t, &b, -1.0)?;
    let half = ops::scale(t, &c, 0.5)?;
    ops::sum_per_example(t, &half)
}

/// Log-density of z under a diagonal Gaussian, summed over latent dims: (b).
pub fn gauss_log_prob<S: Scalar>(t: &mut Tape<S>, q: &DiagGaussian<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
    if z.shape() != q.mu.shape() {
        return Err(Error::shape("gauss_log_prob", q.mu.shape().to_string(), z.shape().to_string()));
    }
    let dz = ops::sub(t, z, &q.mu)?;
    let dz2 = ops::mul(t, &dz, &dz)?;
    let inv_v = {
        let neg_lv = ops::neg(t, &q.log_var)?;
        ops::exp(t, &neg_lv)?
    };
    let maha = ops::mul(t, &dz2, &inv_v)?;
    let inner = ops::add(t, &maha, &q.log_var)?;
    let inner = ops::add_scalar(t, &inner, LN_2PI)?;
    let half = ops::scale(t, &inner, -0.5)?;
    ops::sum_per_example(t, &half)
}

/// Per-component KLs against a mixture, stacked to (b, k).
fn mixture_kl_stack<S: Scalar>(
    t: &mut Tape<S>,
    q: &DiagGaussian<S>,
    p: &MixturePrior<S>,
) -> Result<Tensor<S>> {
    let b = q.mu.shape().batch();
    let mut cols = Vec::with_capacity(p.k());
    for i in 0..p.k() {
        let comp = p.component_for_batch(t, i, b)?;
        let kl = kl_diag_gauss(t, q, &comp)?;
        cols.push(ops::reshape(t, &kl, &[b, 1])?);
    }
    let refs: Vec<&Tensor<S>> = cols.iter().collect();
    ops::concat_features(t, &refs)
}

/// Mixture KL approximation: log(1 / sum_i exp(-KL(q || p_i))), evaluated
/// with a max-shifted log-sum-exp. The value can go negative for strongly
/// overlapping q; callers may log a diagnostic when it does.
pub fn kl_mixture_approx<S: Scalar>(
    t: &mut Tape<S>,
    q: &DiagGaussian<S>,
    p: &MixturePrior<S>,
) -> Result<Tensor<S>> {
    let kls = mixture_kl_stack(t, q, p)?;
    let neg_kls = ops::neg(t, &kls)?;
    let lse = ops::row_logsumexp(t, &neg_kls)?;
    ops::neg(t, &lse)
}

/// Softmax over components of -KL(q || p_i): rows sum to 1, shape (b, k).
pub fn mixture_responsibilities<S: Scalar>(
    t: &mut Tape<S>,
    q: &DiagGaussian<S>,
    p: &MixturePrior<S>,
) -> Result<Tensor<S>> {
    let kls = mixture_kl_stack(t, q, p)?;
    let neg_kls = ops::neg(t, &kls)?;
    ops::row_softmax(t, &neg_kls)
}

/// Exact mixture log-density of z (uniform weights): (b). Used by the
/// importance-weighted evaluator, which needs the true prior density rather
/// than the training-time KL approximation.
pub fn mixture_log_prob<S: Scalar>(
    t: &mut Tape<S>,
    p: &MixturePrior<S>,
    z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let b = z.shape().batch();
    let mut cols = Vec::with_capacity(p.k());
    for i in 0..p.k() {
        let comp = p.component_for_batch(t, i, b)?;
        let lp = gauss_log_prob(t, &comp, z)?;
        cols.push(ops::reshape(t, &lp, &[b, 1])?);
    }
    let refs: Vec<&Tensor<S>> = cols.iter().collect();
    let stack = ops::concat_features(t, &refs)?;
    let lse = ops::row_logsumexp(t, &stack)?;
    ops::add_scalar(t, &lse, -(p.k() as f64).ln())
}

/// Mean over the batch of the entropy of responsibility rows, in nats.
/// Under a checked tape, rows that do not sum to 1 are rejected.
pub fn entropy_penalty<S: Scalar>(t: &mut Tape<S>, resp: &Tensor<S>) -> Result<Tensor<S>> {
    if resp.shape().rank() != 2 {
        return Err(Error::shape("entropy_penalty", "rank-2 (b,k)", resp.shape().to_string()));
    }
    if t.is_checked() {
        let (b, k) = (resp.shape().batch(), resp.shape().features());
        for bi in 0..b {
            let row_sum: f64 = resp.data()[bi * k..(bi + 1) * k].iter().map(|v| v.as_f64()).sum();
            if (row_sum - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(
                    "entropy_penalty",
                    format!("row {bi} sums to {row_sum}, expected 1"),
                ));
            }
        }
    }
    let b = resp.shape().batch();
    let floored = ops::clamp_min(t, resp, PROB_FLOOR)?;
    let log_r = ops::ln(t, &floored)?;
    let r_log_r = ops::mul(t, resp, &log_r)?;
    let total = ops::sum_all(t, &r_log_r)?;
    ops::scale(t, &total, -1.0 / b as f64)
}

/// Multi-sample importance-weighted bound: log-mean-exp over the sample axis
/// of (b, k) log-weights, per example (b), in nats.
pub fn iwae_bound<S: Scalar>(t: &mut Tape<S>, log_weights: &Tensor<S>) -> Result<Tensor<S>> {
    if log_weights.shape().rank() != 2 {
        return Err(Error::shape("iwae_bound", "rank-2 (b,k)", log_weights.shape().to_string()));
    }
    let k = log_weights.shape().features();
    let lse = ops::row_logsumexp(t, log_weights)?;
    ops::add_scalar(t, &lse, -(k as f64).ln())
}

/// Negative log-likelihood rescaled to bits per sub-pixel with the
/// discrete/continuous correction for densities over [0,1]-scaled,
/// uniformly dequantized data: (nll/n + ln 256) / ln 2.
pub fn bits_per_pixel(nll_nats: f64, num_subpixels: usize) -> Result<f64> {
    if num_subpixels == 0 {
        return Err(Error::invalid("bits_per_pixel", "num_subpixels must be positive"));
    }
    Ok((nll_nats / num_subpixels as f64 + 256f64.ln()) / std::f64::consts::LN_2)
}

/// Output likelihood family for the observation model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LikelihoodKind {
    Bernoulli,
    DiagGaussian,
    IntegratedLogistic,
}

impl LikelihoodKind {
    /// Parameter maps emitted per data channel.
    pub fn params_per_channel(self) -> usize {
        match self {
            LikelihoodKind::Bernoulli => 1,
            LikelihoodKind::DiagGaussian | LikelihoodKind::IntegratedLogistic => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LikelihoodKind::Bernoulli => "bernoulli",
            LikelihoodKind::DiagGaussian => "gaussian",
            LikelihoodKind::IntegratedLogistic => "logistic",
        }
    }
}

/// Likelihood parameters as emitted by the network: for Bernoulli one logit
/// map per channel; for the two-parameter families the first half of the
/// feature maps is the location, the second half the (log) scale.
pub struct OutputLikelihood<S: Scalar> {
    pub kind: LikelihoodKind,
    pub params: Tensor<S>,
}

impl<S: Scalar> OutputLikelihood<S> {
    pub fn new(kind: LikelihoodKind, params: Tensor<S>) -> Self {
        OutputLikelihood { kind, params }
    }

    fn split_params(&self, t: &mut Tape<S>, data_channels: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        let loc = ops::slice_features(t, &self.params, 0, data_channels)?;
        let scale = ops::slice_features(t, &self.params, data_channels, data_channels)?;
        Ok((loc, scale))
    }

    /// Per-element negative log-likelihood map, same shape as x.
    ///
    /// `strict` additionally rejects non-binary Bernoulli targets under a
    /// checked tape; the inference regularizer evaluates soft targets and
    /// passes `strict = false`.
    pub fn nll_map(&self, t: &mut Tape<S>, x: &Tensor<S>, strict: bool) -> Result<Tensor<S>> {
        let c = x.shape().features();
        if self.params.shape().features() != c * self.kind.params_per_channel()
            || self.params.shape().batch() != x.shape().batch()
        {
            return Err(Error::shape(
                "nll",
                format!("params for data {}", x.shape()),
                self.params.shape().to_string(),
            ));
        }
        match self.kind {
            LikelihoodKind::Bernoulli => {
                if t.is_checked() {
                    let bad = x.data().iter().any(|v| {
                        let f = v.as_f64();
                        if strict {
                            f != 0.0 && f != 1.0
                        } else {
                            !(0.0..=1.0).contains(&f)
                        }
                    });
                    if bad {
                        return Err(Error::invalid("nll", "non-binary data under bernoulli likelihood"));
                    }
                }
                // softplus(l) - x * l
                let sp = ops::softplus(t, &self.params)?;
                let xl = ops::mul(t, x, &self.params)?;
                ops::sub(t, &sp, &xl)
            }
            LikelihoodKind::DiagGaussian => {
                let (mu, log_var) = self.split_params(t, c)?;
                let log_var = ops::clamp(t, &log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
                let d = ops::sub(t, x, &mu)?;
                let d2 = ops::mul(t, &d, &d)?;
                let inv_v = {
                    let neg = ops::neg(t, &log_var)?;
                    ops::exp(t, &neg)?
                };
                let maha = ops::mul(t, &d2, &inv_v)?;
                let inner = ops::add(t, &maha, &log_var)?;
                let inner = ops::add_scalar(t, &inner, LN_2PI)?;
                ops::scale(t, &inner, 0.5)
            }
            LikelihoodKind::IntegratedLogistic => {
                // bin mass CDF(x + 1/256) - CDF(x - 1/256) on [0,1] data,
                // with open-ended boundary bins.
                let h = 1.0 / 256.0;
                let (mu, log_s) = self.split_params(t, c)?;
                let log_s = ops::clamp(t, &log_s, LOG_VAR_MIN, LOG_VAR_MAX)?;
                let inv_s = {
                    let neg = ops::neg(t, &log_s)?;
                    ops::exp(t, &neg)?
                };
                let centered = ops::sub(t, x, &mu)?;
                let hi_arg = {
                    let a = ops::add_scalar(t, &centered, h)?;
                    ops::mul(t, &a, &inv_s)?
                };
                let lo_arg = {
                    let a = ops::add_scalar(t, &centered, -h)?;
                    ops::mul(t, &a, &inv_s)?
                };
                let cdf_hi = ops::sigmoid(t, &hi_arg)?;
                let cdf_lo = ops::sigmoid(t, &lo_arg)?;

                // constant selection masks from the data values
                let n = x.numel();
                let mut m_lo = vec![S::zero(); n];
                let mut m_hi = vec![S::zero(); n];
                let mut m_mid = vec![S::zero(); n];
                for (i, v) in x.data().iter().enumerate() {
                    let f = v.as_f64();
                    if f < h {
                        m_lo[i] = S::one();
                    } else if f > 1.0 - h {
                        m_hi[i] = S::one();
                    } else {
                        m_mid[i] = S::one();
                    }
                }
                let m_lo = Tensor::from_vec(m_lo, x.dims());
                let m_hi = Tensor::from_vec(m_hi, x.dims());
                let m_mid = Tensor::from_vec(m_mid, x.dims());

                let mid_mass = ops::sub(t, &cdf_hi, &cdf_lo)?;
                let hi_mass = {
                    let neg = ops::neg(t, &cdf_lo)?;
                    ops::add_scalar(t, &neg, 1.0)?
                };
                let p_mid = ops::mul(t, &mid_mass, &m_mid)?;
                let p_lo = ops::mul(t, &cdf_hi, &m_lo)?;
                let p_hi = ops::mul(t, &hi_mass, &m_hi)?;
                let p = {
                    let a = ops::add(t, &p_mid, &p_lo)?;
                    ops::add(t, &a, &p_hi)?
                };
                let p = ops::clamp_min(t, &p, PROB_FLOOR)?;
                let lp = ops::ln(t, &p)?;
                ops::neg(t, &lp)
            }
        }
    }

    /// Per-example NLL in nats (sum of the per-element map over non-batch dims).
    pub fn nll(&self, t: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let map = self.nll_map(t, x, true)?;
        ops::sum_per_example(t, &map)
    }

    /// Distribution mean per element (probabilities for Bernoulli).
    pub fn mean(&self, t: &mut Tape<S>, data_channels: usize) -> Result<Tensor<S>> {
        match self.kind {
            LikelihoodKind::Bernoulli => ops::sigmoid(t, &self.params),
            LikelihoodKind::DiagGaussian | LikelihoodKind::IntegratedLogistic => {
                Ok(self.split_params(t, data_channels)?.0)
            }
        }
    }

    /// Draw one observation per element. Plain data, never tape-recorded.
    pub fn sample(&self, data_channels: usize, rng: &mut Rng) -> Tensor<S> {
        let c = data_channels;
        let f = self.params.shape().features();
        debug_assert_eq!(f, c * self.kind.params_per_channel());
        match self.kind {
            LikelihoodKind::Bernoulli => {
                let data = self
                    .params
                    .data()
                    .iter()
                    .map(|l| {
                        let p = 1.0 / (1.0 + (-l.as_f64()).exp());
                        if rng.uniform() < p {
                            S::one()
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                Tensor::from_vec(data, self.params.dims())
            }
            LikelihoodKind::DiagGaussian | LikelihoodKind::IntegratedLogistic => {
                let dims = self.params.dims();
                let b = dims[0];
                let per_param = self.params.shape().per_example();
                let trailing: usize = dims[2..].iter().product();
                let block = c * trailing;
                let mut out = vec![S::zero(); b * block];
                for bi in 0..b {
                    let p = &self.params.data()[bi * per_param..(bi + 1) * per_param];
                    for i in 0..block {
                        let mu = p[i].as_f64();
                        let spread = p[block + i].as_f64();
                        let v = match self.kind {
                            LikelihoodKind::DiagGaussian => mu + (0.5 * spread).exp() * rng.normal(),
                            _ => {
                                let u = rng.uniform().clamp(1e-9, 1.0 - 1e-9);
                                mu + spread.exp() * (u / (1.0 - u)).ln()
                            }
                        };
                        out[bi * block + i] = S::of(v);
                    }
                }
                let mut out_dims = dims.to_vec();
                out_dims[1] = c;
                Tensor::from_vec(out, &out_dims)
            }
        }
    }
}
