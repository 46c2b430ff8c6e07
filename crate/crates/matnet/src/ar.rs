//! Masked-convolution autoregressive output head.
//!
//! A small PixelCNN-style stack conditioned on the final TD feature map. The
//! first layer uses a type-A raster mask (centre excluded), the rest type-B
//! (centre included). The conditioning path from the TD features into every
//! layer is unmasked: those features are separated from the ground truth by
//! the latent channel, so no raster restriction is needed there. Channels are
//! factorized given the TD features; there is no intra-pixel channel
//! autoregression.

use crate::dist::{LikelihoodKind, OutputLikelihood};
use crate::error::{Error, Result};
use crate::layers::{Conv, LRELU_SLOPE};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Raster-order kernel mask kind.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MaskKind {
    /// Taps at raster positions >= centre are zeroed.
    A,
    /// Taps at raster positions > centre are zeroed.
    B,
}

/// Binary kernel mask enforcing raster causality.
pub fn raster_mask<S: Scalar>(kind: MaskKind, co: usize, ci: usize, k: usize) -> Tensor<S> {
    let c = k / 2;
    let mut data = vec![S::zero(); co * ci * k * k];
    for o in 0..co {
        for i in 0..ci {
            for ki in 0..k {
                for kj in 0..k {
                    let keep = ki < c || (ki == c && (kj < c || (kj == c && kind == MaskKind::B)));
                    if keep {
                        data[((o * ci + i) * k + ki) * k + kj] = S::one();
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, &[co, ci, k, k])
}

/// One masked layer: raster-masked convolution of the running activations
/// plus an unmasked conditioning convolution of the TD features.
#[derive(Clone)]
pub struct MaskedConvLayer<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
    pub mask: Tensor<S>,
    pub cond: Conv<S>,
}

impl<S: Scalar> MaskedConvLayer<S> {
    pub fn new(rng: &Rng, name: &str, kind: MaskKind, co: usize, ci: usize, cond_c: usize, k: usize, scale: f64) -> Self {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt() * scale;
        let mut r = rng.split_named(name);
        MaskedConvLayer {
            kernel: Tensor::randn(&[co, ci, k, k], std, &mut r),
            bias: Tensor::zeros(&[co]),
            mask: raster_mask(kind, co, ci, k),
            cond: Conv::kaiming(rng, &format!("{name}.cond"), co, cond_c, k, scale),
        }
    }

    pub fn forward(&self, t: &mut Tape<S>, act: &Tensor<S>, td_feat: &Tensor<S>) -> Result<Tensor<S>> {
        let masked = ops::mul(t, &self.kernel, &self.mask.detach())?;
        let a = ops::conv2d_same(t, act, &masked, &self.bias)?;
        let c = self.cond.apply(t, td_feat)?;
        ops::add(t, &a, &c)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f(format!("{prefix}.kernel"), &self.kernel);
        f(format!("{prefix}.bias"), &self.bias);
        self.cond.visit(&format!("{prefix}.cond"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(format!("{prefix}.kernel"), &mut self.kernel);
        f(format!("{prefix}.bias"), &mut self.bias);
        self.cond.visit_mut(&format!("{prefix}.cond"), f);
    }
}

/// The autoregressive head: one type-A layer followed by type-B layers, the
/// last of which emits per-pixel likelihood parameters.
#[derive(Clone)]
pub struct ArHead<S: Scalar> {
    pub layers: Vec<MaskedConvLayer<S>>,
    pub kind: LikelihoodKind,
    pub data_channels: usize,
}

impl<S: Scalar> ArHead<S> {
    /// `td_c` is the channel count of the conditioning TD feature map.
    pub fn new(
        rng: &Rng,
        name: &str,
        kind: LikelihoodKind,
        data_c: usize,
        td_c: usize,
        features: usize,
        num_layers: usize,
        k: usize,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::invalid("ArHead", "need at least one layer"));
        }
        let params_c = data_c * kind.params_per_channel();
        let mut layers = Vec::with_capacity(num_layers);
        for li in 0..num_layers {
            let mask_kind = if li == 0 { MaskKind::A } else { MaskKind::B };
            let ci = if li == 0 { data_c } else { features };
            let co = if li == num_layers - 1 { params_c } else { features };
            let scale = if li == num_layers - 1 { 0.1 } else { 1.0 };
            layers.push(MaskedConvLayer::new(
                rng,
                &format!("{name}.layer{li}"),
                mask_kind,
                co,
                ci,
                td_c,
                k,
                scale,
            ));
        }
        Ok(ArHead { layers, kind, data_channels: data_c })
    }

    /// Per-pixel likelihood parameters for teacher-forced input x.
    pub fn forward(&self, t: &mut Tape<S>, x: &Tensor<S>, td_feat: &Tensor<S>) -> Result<Tensor<S>> {
        if x.dims()[2..] != td_feat.dims()[2..] || x.shape().batch() != td_feat.shape().batch() {
            return Err(Error::shape("ar_forward", x.shape().to_string(), td_feat.shape().to_string()));
        }
        let mut act = x.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            act = layer.forward(t, &act, td_feat)?;
            if li != last {
                act = ops::lrelu(t, &act, LRELU_SLOPE)?;
            }
        }
        Ok(act)
    }

    /// Per-example NLL of x under the teacher-forced parameters.
    pub fn nll(&self, t: &mut Tape<S>, x: &Tensor<S>, td_feat: &Tensor<S>) -> Result<Tensor<S>> {
        let params = self.forward(t, x, td_feat)?;
        OutputLikelihood::new(self.kind, params).nll(t, x)
    }

    /// Per-element NLL map (used for mask-weighted conditional bounds).
    pub fn nll_map(&self, t: &mut Tape<S>, x: &Tensor<S>, td_feat: &Tensor<S>, strict: bool) -> Result<Tensor<S>> {
        let params = self.forward(t, x, td_feat)?;
        OutputLikelihood::new(self.kind, params).nll_map(t, x, strict)
    }

    /// Raster-order ancestral sampling: one full forward pass per pixel.
    pub fn sample(&self, td_feat: &Tensor<S>, rng: &mut Rng) -> Result<Tensor<S>> {
        let b = td_feat.shape().batch();
        let (h, w) = td_feat.shape().hw();
        let c = self.data_channels;
        let mut x = Tensor::<S>::zeros(&[b, c, h, w]);
        for row in 0..h {
            for col in 0..w {
                let mut t = Tape::inert();
                let params = self.forward(&mut t, &x, td_feat)?;
                let pix = OutputLikelihood::new(self.kind, params).sample(c, rng);
                // overwrite just this pixel, leaving the sampled prefix alone
                let mut data = x.data().to_vec();
                let plane = h * w;
                for bi in 0..b {
                    for ci in 0..c {
                        let idx = (bi * c + ci) * plane + row * w + col;
                        data[idx] = pix.data()[idx];
                    }
                }
                x = Tensor::from_vec(data, x.dims());
            }
        }
        Ok(x)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        for (li, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layer{li}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layer{li}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::GradCheck;

    fn head(kind: LikelihoodKind, layers: usize, seed: u64) -> ArHead<f64> {
        let rng = Rng::new(seed, 0);
        ArHead::new(&rng, "ar", kind, 1, 3, 8, layers, 3).unwrap()
    }

    #[test]
    fn mask_structure() {
        let a: Tensor<f64> = raster_mask(MaskKind::A, 1, 1, 3);
        assert_eq!(a.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b: Tensor<f64> = raster_mask(MaskKind::B, 1, 1, 3);
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_masked_kernels_depend_only_on_conditioning() {
        let mut h = head(LikelihoodKind::Bernoulli, 3, 1);
        for layer in &mut h.layers {
            layer.kernel = Tensor::zeros(layer.kernel.dims());
        }
        let mut rng = Rng::new(2, 0);
        let td = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let x1 = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let x2 = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let mut t = Tape::inert();
        let p1 = h.forward(&mut t, &x1, &td).unwrap();
        let p2 = h.forward(&mut t, &x2, &td).unwrap();
        assert_eq!(p1.data(), p2.data());
    }

    #[test]
    fn raster_causality_is_exact() {
        let h = head(LikelihoodKind::Bernoulli, 3, 3);
        let mut rng = Rng::new(4, 0);
        let td = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        for r in 0..4usize {
            for c in 0..4usize {
                let mut t = Tape::new();
                let params = h.forward(&mut t, &x, &td).unwrap();
                // root: the output at pixel (r, c)
                let plane = 16;
                let mut sel = vec![0.0f64; params.numel()];
                sel[r * 4 + c] = 1.0;
                let sel = Tensor::from_vec(sel, params.dims());
                let picked = ops::mul(&mut t, &params, &sel).unwrap();
                let root = ops::sum_all(&mut t, &picked).unwrap();
                let grads = t.backward(&root).unwrap();
                let gx = grads.wrt(&x);
                for rr in 0..4usize {
                    for cc in 0..4usize {
                        let v = gx.data()[rr * 4 + cc];
                        if rr * 4 + cc >= r * 4 + c {
                            assert_eq!(v, 0.0, "gradient leaks from ({rr},{cc}) into ({r},{c})");
                        }
                    }
                }
                let _ = plane;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = head(LikelihoodKind::Bernoulli, 2, 5);
        let mut rng = Rng::new(6, 0);
        let td = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng);
        let x = Tensor::from_vec(
            (0..9).map(|i| f64::from(i % 2)).collect(),
            &[1, 1, 3, 3],
        );
        let gc = GradCheck::default();
        let worst = gc
            .run(
                &[
                    &h.layers[0].kernel,
                    &h.layers[0].cond.kernel,
                    &h.layers[1].kernel,
                    &h.layers[1].bias,
                    &h.layers[1].cond.kernel,
                    &td,
                ],
                |t, ins| {
                    let mut probe = h.clone();
                    probe.layers[0].kernel = ins[0].clone();
                    probe.layers[0].cond.kernel = ins[1].clone();
                    probe.layers[1].kernel = ins[2].clone();
                    probe.layers[1].bias = ins[3].clone();
                    probe.layers[1].cond.kernel = ins[4].clone();
                    let nll = probe.nll(t, &x, &ins[5]).unwrap();
                    ops::sum_all(t, &nll).unwrap()
                },
            )
            .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn sampling_prefix_is_stable_and_deterministic() {
        let h = head(LikelihoodKind::Bernoulli, 2, 7);
        let mut rng = Rng::new(8, 0);
        let td = Tensor::randn(&[1, 3, 3, 3], 0.5, &mut rng);
        let s1 = h.sample(&td, &mut Rng::new(42, 9)).unwrap();
        let s2 = h.sample(&td, &mut Rng::new(42, 9)).unwrap();
        assert_eq!(s1.data(), s2.data());
        assert!(s1.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn teacher_forced_logprob_matches_stepwise_sampling_account() {
        // log-probability of a teacher-forced sequence equals the sum of the
        // stepwise log-probabilities a sampler would assign along the way
        let h = head(LikelihoodKind::Bernoulli, 3, 9);
        let mut rng = Rng::new(10, 0);
        let td = Tensor::randn(&[1, 3, 3, 3], 0.5, &mut rng);
        let x = h.sample(&td, &mut Rng::new(11, 0)).unwrap();

        let mut t = Tape::inert();
        let teacher_nll = h.nll(&mut t, &x, &td).unwrap().data()[0];

        // stepwise: re-run the head per pixel on the growing prefix
        let mut stepwise = 0.0;
        let mut prefix = Tensor::<f64>::zeros(x.dims());
        for r in 0..3usize {
            for c in 0..3usize {
                let mut t = Tape::inert();
                let params = h.forward(&mut t, &prefix, &td).unwrap();
                let logit = params.data()[r * 3 + c];
                let xv = x.data()[r * 3 + c];
                let p1 = 1.0 / (1.0 + (-logit).exp());
                stepwise -= if xv > 0.5 { p1.ln() } else { (1.0 - p1).ln() };
                let mut d = prefix.data().to_vec();
                d[r * 3 + c] = xv;
                prefix = Tensor::from_vec(d, x.dims());
            }
        }
        let rel = (teacher_nll - stepwise).abs() / stepwise.abs().max(1.0);
        assert!(rel < 1e-6, "teacher {teacher_nll} vs stepwise {stepwise}");
    }
}
