//! Inference, generation, bound computation, importance-weighted evaluation,
//! the inference-only regularizer, and two-stage imputation.

use crate::dist::{
    self, gauss_log_prob, iwae_bound, kl_diag_gauss, kl_mixture_approx, mixture_log_prob,
    mixture_responsibilities, reparam_sample, DiagGaussian, OutputLikelihood,
};
use crate::error::{Error, Result};
use crate::layers::LRELU_SLOPE;
use crate::model::{BuPath, MatNet, MergePath, OutputHead, Prior, StartShape};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// An observation: an image batch, the known-pixel mask for conditional
/// models (1 = known), and the stage-2 fill channels when applicable.
#[derive(Clone)]
pub struct Observation<S: Scalar> {
    pub x: Tensor<S>,
    pub mask: Option<Tensor<S>>,
    pub fill: Option<Tensor<S>>,
}

impl<S: Scalar> Observation<S> {
    pub fn full(x: Tensor<S>) -> Self {
        Observation { x, mask: None, fill: None }
    }

    pub fn masked(x: Tensor<S>, mask: Tensor<S>) -> Result<Self> {
        if mask.shape() != x.shape() {
            return Err(Error::shape("Observation", x.shape().to_string(), mask.shape().to_string()));
        }
        if !mask.data().iter().all(|v| *v == S::zero() || *v == S::one()) {
            return Err(Error::invalid("Observation", "mask must be binary"));
        }
        Ok(Observation { x, mask: Some(mask), fill: None })
    }

    pub fn with_fill(mut self, fill: Tensor<S>) -> Self {
        self.fill = Some(fill);
        self
    }

    pub fn batch(&self) -> usize {
        self.x.shape().batch()
    }

    /// Complement mask (1 = unknown) as a plain tensor.
    pub fn unknown_mask(&self) -> Option<Tensor<S>> {
        self.mask.as_ref().map(|m| {
            Tensor::from_vec(m.data().iter().map(|v| S::one() - *v).collect(), m.dims())
        })
    }
}

/// Per-layer latent record produced by inference.
pub struct LatentLayerRecord<S: Scalar> {
    pub label: String,
    pub z: Tensor<S>,
    pub posterior: DiagGaussian<S>,
    /// Layer prior; `None` for z0 under a mixture prior (the KL then comes
    /// from the mixture approximation).
    pub prior: Option<DiagGaussian<S>>,
    /// Closed-form KL contribution, shape (b).
    pub kl: Tensor<S>,
}

/// Outcome of an inference pass.
pub struct InferOutcome<S: Scalar> {
    pub layers: Vec<LatentLayerRecord<S>>,
    /// Full-resolution TD feature map feeding the output head.
    pub td_features: Tensor<S>,
    /// Mixture responsibilities for z0, when the prior is a mixture.
    pub responsibilities: Option<Tensor<S>>,
}

/// Outcome of the differentiable part of generation.
pub struct GenOutcome<S: Scalar> {
    pub priors: Vec<DiagGaussian<S>>,
    pub zs: Vec<Tensor<S>>,
    pub td_features: Tensor<S>,
    /// Likelihood parameters (factorized head only; the AR head samples
    /// sequentially instead).
    pub params: Option<Tensor<S>>,
}

/// Free-energy bound report. All tensors are per-example, in nats.
pub struct FreeEnergyReport<S: Scalar> {
    pub recon_nll: Tensor<S>,
    pub layer_kls: Vec<Tensor<S>>,
    pub layer_labels: Vec<String>,
    pub total_bound: Tensor<S>,
    /// Mean responsibility entropy (mixture prior only); reported separately
    /// from the bound and weighted into the loss by the caller.
    pub entropy: Option<Tensor<S>>,
    pub responsibilities: Option<Tensor<S>>,
    /// The mixture KL approximation went negative somewhere in this batch.
    pub mixture_kl_negative: bool,
}

impl<S: Scalar> FreeEnergyReport<S> {
    /// Mean total bound over the batch, as a scalar tensor.
    pub fn mean_bound(&self, t: &mut Tape<S>) -> Result<Tensor<S>> {
        ops::mean_all(t, &self.total_bound)
    }
}

fn stack_mask_channels<S: Scalar>(m: &Tensor<S>) -> Tensor<S> {
    m.detach()
}

impl<S: Scalar> MatNet<S> {
    fn bu_inputs(&self, t: &mut Tape<S>, obs: &Observation<S>) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        if !self.cfg.conditional {
            return Ok((obs.x.clone(), None));
        }
        let mask = obs
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid("infer", "conditional model requires an observation mask"))?;
        if mask.shape() != obs.x.shape() {
            return Err(Error::shape("infer", obs.x.shape().to_string(), mask.shape().to_string()));
        }
        let unknown = obs.unknown_mask().expect("mask present");
        let x_known = ops::mul(t, &obs.x, &mask.detach())?;
        let x_unknown = ops::mul(t, &obs.x, &unknown)?;
        let mask_c = stack_mask_channels(mask);

        let mut inf_parts: Vec<&Tensor<S>> = vec![&x_known, &x_unknown, &mask_c];
        let mut gen_parts: Vec<&Tensor<S>> = vec![&x_known, &mask_c];
        let fill;
        if self.cfg.stage2 {
            fill = obs
                .fill
                .as_ref()
                .ok_or_else(|| Error::invalid("infer", "stage-2 model requires fill channels"))?
                .detach();
            inf_parts.push(&fill);
            gen_parts.push(&fill);
        }
        let inf = ops::concat_features(t, &inf_parts)?;
        let gen = ops::concat_features(t, &gen_parts)?;
        Ok((inf, Some(gen)))
    }

    fn run_bu(&self, t: &mut Tape<S>, path: &BuPath<S>, input: &Tensor<S>) -> Result<(Vec<Vec<Tensor<S>>>, DiagGaussian<S>)> {
        let mut h = path.read_in.conv0.apply(t, input)?;
        h = ops::lrelu(t, &h, LRELU_SLOPE)?;
        for d in &path.read_in.downs {
            h = d.apply(t, &h)?;
        }
        let mut states: Vec<Vec<Tensor<S>>> = Vec::with_capacity(path.metas.len());
        for meta in &path.metas {
            let mut scale_states = Vec::with_capacity(meta.modules.len());
            for m in &meta.modules {
                h = m.forward(t, &h)?;
                scale_states.push(h.clone());
            }
            for e in &meta.exit {
                h = e.apply(t, &h)?;
            }
            states.push(scale_states);
        }
        let flat = if h.shape().rank() > 2 {
            let b = h.shape().batch();
            ops::reshape(t, &h, &[b, h.shape().per_example()])?
        } else {
            h
        };
        let raw = path.z0_readout.apply(t, &flat)?;
        let q = crate::layers::split_gaussian(t, &raw, self.cfg.z0_dim)?;
        Ok((states, q))
    }

    fn td_start(&self, t: &mut Tape<S>, z0: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.td.start.apply(t, z0)?;
        let h = ops::lrelu(t, &h, LRELU_SLOPE)?;
        match self.td.start_shape {
            StartShape::Fc => Ok(h),
            StartShape::Spatial { channels, hw } => {
                let b = h.shape().batch();
                ops::reshape(t, &h, &[b, channels, hw, hw])
            }
        }
    }

    fn merge_init(&self, path: &MergePath<S>, b: usize) -> Tensor<S> {
        let mut dims = vec![b];
        dims.extend_from_slice(&path.init_tail);
        Tensor::zeros(&dims)
    }

    fn read_out(&self, t: &mut Tape<S>, h_t: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = h_t.clone();
        for up in &self.td.read_out_ups {
            h = up.apply(t, &h)?;
        }
        Ok(h)
    }

    /// Run inference: BU pass, then the TD pass with merge modules producing
    /// per-layer posteriors, priors, samples, and KL terms.
    pub fn infer(&self, t: &mut Tape<S>, obs: &Observation<S>, rng: &mut Rng) -> Result<InferOutcome<S>> {
        let b = obs.batch();
        let labels = self.layer_labels();
        let (inf_in, gen_in) = self.bu_inputs(t, obs)?;
        let (bu_states, q_z0) = self.run_bu(t, &self.bu_inf, &inf_in)?;
        let gen_side = match (&self.bu_gen, gen_in) {
            (Some(path), Some(input)) => Some(self.run_bu(t, path, &input)?),
            _ => None,
        };

        let eps0 = dist::draw_eps::<S>(q_z0.dims(), rng);
        let z0 = reparam_sample(t, &q_z0, &eps0)?;

        let mut responsibilities = None;
        let (kl0, prior0) = match (&gen_side, &self.prior) {
            (Some((_, p_z0)), _) => (kl_diag_gauss(t, &q_z0, p_z0)?, Some(p_z0.clone())),
            (None, Prior::Standard) => {
                let std = DiagGaussian::standard(q_z0.dims());
                (kl_diag_gauss(t, &q_z0, &std)?, Some(std))
            }
            (None, Prior::Mixture(mix)) => {
                responsibilities = Some(mixture_responsibilities(t, &q_z0, mix)?);
                (kl_mixture_approx(t, &q_z0, mix)?, None)
            }
        };

        let mut layers = Vec::with_capacity(self.depth() + 1);
        layers.push(LatentLayerRecord {
            label: labels[0].clone(),
            z: z0.clone(),
            posterior: q_z0,
            prior: prior0,
            kl: kl0,
        });

        let mut h_t = self.td_start(t, &z0)?;
        let mut h_m_inf = self.merge_init(&self.merges_inf, b);
        let mut h_m_gen = self.merges_gen.as_ref().map(|m| self.merge_init(m, b));

        let n_scales = self.scales.len();
        let mut layer_idx = 1;
        for (ti, td_meta) in self.td.metas.iter().enumerate() {
            let scale_idx = n_scales - 1 - ti;
            let scale_states = &bu_states[scale_idx];
            let n_mods = td_meta.modules.len();
            for (mi, td_mod) in td_meta.modules.iter().enumerate() {
                // BU modules pair with TD modules in reverse evaluation order
                let h_b = &scale_states[n_mods - 1 - mi];

                let prior = match (&self.merges_gen, &gen_side) {
                    (Some(gen_path), Some((gen_states, _))) => {
                        let h_b_gen = &gen_states[scale_idx][n_mods - 1 - mi];
                        let hmg = h_m_gen.as_ref().expect("conditional paths are paired");
                        let (p, hmg_next) = gen_path.metas[ti].modules[mi].forward(t, hmg, h_b_gen, &h_t)?;
                        h_m_gen = Some(hmg_next);
                        p
                    }
                    _ => td_mod.prior(t, &h_t)?,
                };

                let (posterior, h_m_next) =
                    self.merges_inf.metas[ti].modules[mi].forward(t, &h_m_inf, h_b, &h_t)?;
                h_m_inf = h_m_next;

                let eps = dist::draw_eps::<S>(posterior.dims(), rng);
                let z = reparam_sample(t, &posterior, &eps)?;
                let kl = kl_diag_gauss(t, &posterior, &prior)?;
                h_t = td_mod.forward(t, &h_t, &z)?;

                layers.push(LatentLayerRecord {
                    label: labels[layer_idx].clone(),
                    z,
                    posterior,
                    prior: Some(prior),
                    kl,
                });
                layer_idx += 1;
            }
            for e in &td_meta.exit {
                h_t = e.apply(t, &h_t)?;
            }
            for e in &self.merges_inf.metas[ti].exit {
                h_m_inf = e.apply(t, &h_m_inf)?;
            }
            if let (Some(gen_path), Some(hmg)) = (&self.merges_gen, h_m_gen.take()) {
                let mut hmg = hmg;
                for e in &gen_path.metas[ti].exit {
                    hmg = e.apply(t, &hmg)?;
                }
                h_m_gen = Some(hmg);
            }
        }

        let td_features = self.read_out(t, &h_t)?;
        Ok(InferOutcome { layers, td_features, responsibilities })
    }

    /// Differentiable generation pass: ancestral sampling from the prior
    /// chain (or the generator-side merges for conditional models).
    pub fn generate_params(
        &self,
        t: &mut Tape<S>,
        count: usize,
        rng: &mut Rng,
        condition: Option<&Observation<S>>,
    ) -> Result<GenOutcome<S>> {
        if self.cfg.conditional && condition.is_none() {
            return Err(Error::invalid("generate", "conditional model requires a condition"));
        }
        let (b, gen_side) = match condition {
            Some(obs) => {
                if !self.cfg.conditional {
                    return Err(Error::invalid("generate", "unconditional model cannot take a condition"));
                }
                let (_, gen_in) = self.bu_inputs(t, obs)?;
                let path = self.bu_gen.as_ref().expect("conditional model has a generator BU path");
                let side = self.run_bu(t, path, &gen_in.expect("conditional input"))?;
                (obs.batch(), Some(side))
            }
            None => (count, None),
        };

        let mut priors = Vec::new();
        let mut zs = Vec::new();
        let z0 = match (&gen_side, &self.prior) {
            (Some((_, p_z0)), _) => {
                let eps = dist::draw_eps::<S>(p_z0.dims(), rng);
                priors.push(p_z0.clone());
                reparam_sample(t, p_z0, &eps)?
            }
            (None, Prior::Standard) => {
                let std = DiagGaussian::standard(&[b, self.cfg.z0_dim]);
                let eps = dist::draw_eps::<S>(&[b, self.cfg.z0_dim], rng);
                priors.push(std.clone());
                reparam_sample(t, &std, &eps)?
            }
            (None, Prior::Mixture(mix)) => {
                // choose a component uniformly per example, then reparametrize
                let k = mix.k();
                let z_dim = self.cfg.z0_dim;
                let mut data = vec![S::zero(); b * z_dim];
                for bi in 0..b {
                    let ci = rng.below(k);
                    let comp = &mix.components()[ci];
                    for d in 0..z_dim {
                        let mu = comp.mu().data()[d].as_f64();
                        let lv = comp.log_var().data()[d].as_f64().clamp(dist::LOG_VAR_MIN, dist::LOG_VAR_MAX);
                        data[bi * z_dim + d] = S::of(mu + (0.5 * lv).exp() * rng.normal());
                    }
                }
                Tensor::from_vec(data, &[b, z_dim])
            }
        };
        zs.push(z0.clone());

        let mut h_t = self.td_start(t, &z0)?;
        let mut h_m_gen = self.merges_gen.as_ref().map(|m| self.merge_init(m, b));

        let n_scales = self.scales.len();
        for (ti, td_meta) in self.td.metas.iter().enumerate() {
            let n_mods = td_meta.modules.len();
            for (mi, td_mod) in td_meta.modules.iter().enumerate() {
                let prior = match (&self.merges_gen, &gen_side) {
                    (Some(gen_path), Some((gen_states, _))) => {
                        let scale_idx = n_scales - 1 - ti;
                        let h_b_gen = &gen_states[scale_idx][n_mods - 1 - mi];
                        let hmg = h_m_gen.as_ref().expect("paired");
                        let (p, hmg_next) = gen_path.metas[ti].modules[mi].forward(t, hmg, h_b_gen, &h_t)?;
                        h_m_gen = Some(hmg_next);
                        p
                    }
                    _ => td_mod.prior(t, &h_t)?,
                };
                let eps = dist::draw_eps::<S>(prior.dims(), rng);
                let z = reparam_sample(t, &prior, &eps)?;
                h_t = td_mod.forward(t, &h_t, &z)?;
                priors.push(prior);
                zs.push(z);
            }
            for e in &td_meta.exit {
                h_t = e.apply(t, &h_t)?;
            }
            if let (Some(gen_path), Some(hmg)) = (&self.merges_gen, h_m_gen.take()) {
                let mut hmg = hmg;
                for e in &gen_path.metas[ti].exit {
                    hmg = e.apply(t, &hmg)?;
                }
                h_m_gen = Some(hmg);
            }
        }

        let td_features = self.read_out(t, &h_t)?;
        let params = match &self.head {
            OutputHead::Factorized(conv) => Some(conv.apply(t, &td_features)?),
            OutputHead::Ar(_) => None,
        };
        Ok(GenOutcome { priors, zs, td_features, params })
    }

    /// Draw observations from the model. For conditional models the output
    /// overwrites only unknown pixels: known pixels pass through bit-exactly.
    /// With `use_mean` the factorized output head emits the distribution mean
    /// instead of a sample (the AR head always samples).
    pub fn generate(
        &self,
        count: usize,
        rng: &mut Rng,
        condition: Option<&Observation<S>>,
        use_mean: bool,
    ) -> Result<Tensor<S>> {
        let mut t = Tape::inert();
        let out = self.generate_params(&mut t, count, rng, condition)?;
        let c = self.cfg.input_channels;
        let x_gen = match &self.head {
            OutputHead::Factorized(_) => {
                let like = OutputLikelihood::new(self.cfg.likelihood, out.params.expect("factorized head"));
                if use_mean {
                    like.mean(&mut t, c)?
                } else {
                    like.sample(c, rng)
                }
            }
            OutputHead::Ar(head) => head.sample(&out.td_features, rng)?,
        };
        match condition {
            None => Ok(x_gen),
            Some(obs) => {
                let mask = obs.mask.as_ref().expect("conditional observation");
                let unknown = obs.unknown_mask().expect("mask present");
                let x_known = ops::mul(&mut t, &obs.x, mask)?;
                let filled = ops::mul(&mut t, &x_gen, &unknown)?;
                ops::add(&mut t, &x_known, &filled)
            }
        }
    }

    fn recon_nll(
        &self,
        t: &mut Tape<S>,
        obs: &Observation<S>,
        td_features: &Tensor<S>,
        strict: bool,
    ) -> Result<Tensor<S>> {
        let map = match &self.head {
            OutputHead::Factorized(conv) => {
                let params = conv.apply(t, td_features)?;
                OutputLikelihood::new(self.cfg.likelihood, params).nll_map(t, &obs.x, strict)?
            }
            OutputHead::Ar(head) => head.nll_map(t, &obs.x, td_features, strict)?,
        };
        let masked = match obs.unknown_mask() {
            // conditional bound: reconstruction covers unknown pixels only
            Some(unknown) if self.cfg.conditional => ops::mul(t, &map, &unknown)?,
            _ => map,
        };
        ops::sum_per_example(t, &masked)
    }

    /// Variational free-energy bound, averaged over `mc_samples` inference
    /// passes. All terms are per-example and in nats.
    pub fn free_energy(
        &self,
        t: &mut Tape<S>,
        obs: &Observation<S>,
        rng: &mut Rng,
        mc_samples: usize,
    ) -> Result<FreeEnergyReport<S>> {
        self.free_energy_impl(t, obs, rng, mc_samples, true)
    }

    pub(crate) fn free_energy_impl(
        &self,
        t: &mut Tape<S>,
        obs: &Observation<S>,
        rng: &mut Rng,
        mc_samples: usize,
        strict: bool,
    ) -> Result<FreeEnergyReport<S>> {
        if mc_samples == 0 {
            return Err(Error::invalid("free_energy", "mc_samples must be >= 1"));
        }
        let labels = self.layer_labels();
        let mut recon_acc: Option<Tensor<S>> = None;
        let mut kl_acc: Vec<Option<Tensor<S>>> = vec![None; labels.len()];
        let mut resp_acc: Option<Tensor<S>> = None;
        let mut mixture_kl_negative = false;

        for s in 0..mc_samples {
            let mut sample_rng = rng.split(s as u64);
            let inf = self.infer(t, obs, &mut sample_rng)?;
            let recon = self.recon_nll(t, obs, &inf.td_features, strict)?;
            recon_acc = Some(match recon_acc {
                None => recon,
                Some(prev) => ops::add(t, &prev, &recon)?,
            });
            for (li, layer) in inf.layers.iter().enumerate() {
                if layer.prior.is_none() && layer.kl.data().iter().any(|v| *v < S::zero()) {
                    mixture_kl_negative = true;
                }
                kl_acc[li] = Some(match kl_acc[li].take() {
                    None => layer.kl.clone(),
                    Some(prev) => ops::add(t, &prev, &layer.kl)?,
                });
            }
            if let Some(r) = inf.responsibilities {
                resp_acc = Some(match resp_acc {
                    None => r,
                    Some(prev) => ops::add(t, &prev, &r)?,
                });
            }
        }

        let inv = 1.0 / mc_samples as f64;
        let recon_nll = ops::scale(t, &recon_acc.expect("mc_samples >= 1"), inv)?;
        let mut layer_kls = Vec::with_capacity(labels.len());
        for acc in kl_acc {
            layer_kls.push(ops::scale(t, &acc.expect("all layers visited"), inv)?);
        }
        let mut total = recon_nll.clone();
        for kl in &layer_kls {
            total = ops::add(t, &total, kl)?;
        }
        let (responsibilities, entropy) = match resp_acc {
            Some(acc) => {
                let mean_resp = ops::scale(t, &acc, inv)?;
                let ent = dist::entropy_penalty(t, &mean_resp)?;
                (Some(mean_resp), Some(ent))
            }
            None => (None, None),
        };

        Ok(FreeEnergyReport {
            recon_nll,
            layer_kls,
            layer_labels: labels,
            total_bound: total,
            entropy,
            responsibilities,
            mixture_kl_negative,
        })
    }

    /// Importance-weighted NLL estimate with k posterior samples per example.
    /// Returns the mean NLL in nats and the per-example estimates.
    pub fn eval_nll(
        &self,
        obs: &Observation<S>,
        k: usize,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<f64>)> {
        if k == 0 {
            return Err(Error::invalid("eval_nll", "k must be >= 1"));
        }
        let mut t = Tape::inert();
        let b = obs.batch();
        let mut cols = Vec::with_capacity(k);
        for j in 0..k {
            let mut sample_rng = rng.split(j as u64);
            let inf = self.infer(&mut t, obs, &mut sample_rng)?;
            let recon = self.recon_nll(&mut t, obs, &inf.td_features, true)?;
            // log w = -recon + sum_i [ log p_i(z_i) - log q_i(z_i) ]
            let mut logw = ops::neg(&mut t, &recon)?;
            for layer in &inf.layers {
                let log_q = gauss_log_prob(&mut t, &layer.posterior, &layer.z)?;
                let log_p = match &layer.prior {
                    Some(p) => gauss_log_prob(&mut t, p, &layer.z)?,
                    None => match &self.prior {
                        Prior::Mixture(mix) => mixture_log_prob(&mut t, mix, &layer.z)?,
                        Prior::Standard => unreachable!("layer without prior implies mixture"),
                    },
                };
                let diff = ops::sub(&mut t, &log_p, &log_q)?;
                logw = ops::add(&mut t, &logw, &diff)?;
            }
            cols.push(ops::reshape(&mut t, &logw, &[b, 1])?);
        }
        let refs: Vec<&Tensor<S>> = cols.iter().collect();
        let stack = ops::concat_features(&mut t, &refs)?;
        let bound = iwae_bound(&mut t, &stack)?;
        let per_example: Vec<f64> = bound.data().iter().map(|v| -v.as_f64()).collect();
        let mean = per_example.iter().sum::<f64>() / b as f64;
        Ok((mean, per_example))
    }

    /// Inference-only regularizer: maximizes the free-energy bound on
    /// model-generated samples while treating every generator-side parameter
    /// as a constant. The returned scalar loss contributes gradients only to
    /// inference-side parameters.
    pub fn inference_regularizer(
        &self,
        t: &mut Tape<S>,
        count: usize,
        rng: &mut Rng,
        condition: Option<&Observation<S>>,
        hard_sample: bool,
    ) -> Result<Tensor<S>> {
        let mut gen_rng = rng.split(0x9e9);
        let x_gen = self.generate(count, &mut gen_rng, condition, !hard_sample)?;
        let obs = match condition {
            None => Observation::full(x_gen.detach()),
            Some(c) => Observation {
                x: x_gen.detach(),
                mask: c.mask.clone(),
                fill: c.fill.clone(),
            },
        };
        let view = self.inference_only_view();
        let report = view.free_energy_impl(t, &obs, rng, 1, false)?;
        report.mean_bound(t)
    }
}

/// Two-stage imputation: the first stage forms an initial guess for the
/// unknown pixels; the second stage receives that guess as extra generator
/// input and produces the final fill. Known pixels pass through untouched.
pub fn impute_two_stage<S: Scalar>(
    stage1: &MatNet<S>,
    stage2: &MatNet<S>,
    obs: &Observation<S>,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    if !stage1.cfg.conditional || !stage2.cfg.conditional {
        return Err(Error::invalid("impute_two_stage", "both stages must be conditional"));
    }
    if !stage2.cfg.stage2 {
        return Err(Error::invalid("impute_two_stage", "second stage must be built with stage2=true"));
    }
    if stage1.cfg.input_channels != stage2.cfg.input_channels
        || stage1.cfg.input_h != stage2.cfg.input_h
        || stage1.cfg.input_w != stage2.cfg.input_w
    {
        return Err(Error::invalid("impute_two_stage", "stage input shapes differ"));
    }
    let mask = obs
        .mask
        .as_ref()
        .ok_or_else(|| Error::invalid("impute_two_stage", "observation mask required"))?;
    let mut rng1 = rng.split(1);
    let guess = stage1.generate(obs.batch(), &mut rng1, Some(obs), true)?;

    // fill channels: the guess at unknown positions only
    let unknown = obs.unknown_mask().expect("mask present");
    let fill = Tensor::from_vec(
        guess
            .data()
            .iter()
            .zip(unknown.data())
            .map(|(g, u)| *g * *u)
            .collect(),
        guess.dims(),
    );
    let obs2 = Observation::masked(obs.x.clone(), mask.clone())?.with_fill(fill);
    let mut rng2 = rng.split(2);
    stage2.generate(obs.batch(), &mut rng2, Some(&obs2), true)
}
