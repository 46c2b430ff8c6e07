//! MatNet assembly: unconditional and conditional networks built from the
//! layer blocks, with parameter bookkeeping and checkpoint I/O.
//!
//! Path layout for a config with scales listed finest-to-coarsest:
//!
//! - The bottom-up paths read the observation in with a full-resolution
//!   convolution, downsample to the finest scale, then run the BU
//!   meta-modules towards the coarsest scale. The final BU state feeds a
//!   linear readout for the top latent z0.
//! - The top-down path starts from z0, runs meta-modules coarsest-to-finest,
//!   and exits through upsampling connectors back to input resolution where
//!   the output head emits likelihood parameters.
//! - Merge paths mirror the TD path scale-for-scale, carrying a running merge
//!   state that combines BU, TD, and merge information into each latent
//!   posterior (inference path) or conditional prior (generator path).
//!
//! Conditional networks keep two full sets of BU and merge modules: the
//! inference side sees known pixels, unknown pixels, and the mask; the
//! generator side sees only known pixels and the mask, which is what makes
//! generation structurally independent of unknown content.

pub mod run;

use crate::ar::ArHead;
use crate::config::{ModelConfig, PriorSpec, ScaleSpec};
use crate::dist::{DiagGaussian, MixturePrior};
use crate::error::{Error, Result};
use crate::layers::{BuModule, Connector, Conv, Dense, MergeModule, TdModule};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{io, Tensor};

/// Parameter group, used to route gradients (the inference regularizer
/// updates only the inference-side groups) and to label checkpoints.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ParamGroup {
    /// Top-down generative path, including readouts and the output head.
    TdGen,
    /// Inference bottom-up path (read-in, modules, z0 readout).
    BuInf,
    /// Inference merge modules and their connectors.
    MergeInf,
    /// Generator-side bottom-up path (conditional models).
    BuGen,
    /// Generator-side merge modules (conditional models).
    MergeGen,
    /// Autoregressive output head.
    ArHead,
    /// Mixture-prior component parameters.
    Prior,
}

impl ParamGroup {
    /// Groups whose parameters the inference regularizer may update.
    pub fn is_inference_side(self) -> bool {
        matches!(self, ParamGroup::BuInf | ParamGroup::MergeInf)
    }
}

/// Resolved per-scale layout, finest to coarsest.
#[derive(Clone, Debug)]
pub(crate) enum ScaleInfo {
    Spatial { hw: usize, channels: usize, modules: usize },
    Fc { width: usize, modules: usize },
}

impl ScaleInfo {
    fn modules(&self) -> usize {
        match self {
            ScaleInfo::Spatial { modules, .. } | ScaleInfo::Fc { modules, .. } => *modules,
        }
    }

    fn label(&self) -> String {
        match self {
            ScaleInfo::Spatial { hw, .. } => format!("s{hw}"),
            ScaleInfo::Fc { .. } => "fc".to_string(),
        }
    }
}

fn resolve_scales(cfg: &ModelConfig) -> Vec<ScaleInfo> {
    let mut out = Vec::new();
    let mut ch_iter = cfg.channels.iter();
    for (si, s) in cfg.scales.iter().enumerate() {
        match s {
            ScaleSpec::Spatial { hw } => out.push(ScaleInfo::Spatial {
                hw: *hw,
                channels: *ch_iter.next().expect("validated: channels align with spatial scales"),
                modules: cfg.modules[si],
            }),
            ScaleSpec::Fc { width } => out.push(ScaleInfo::Fc {
                width: *width,
                modules: cfg.modules[si],
            }),
        }
    }
    out
}

/// Full-resolution read-in convolution plus the down chain to the finest scale.
#[derive(Clone)]
pub struct ReadIn<S: Scalar> {
    pub conv0: Conv<S>,
    pub downs: Vec<Connector<S>>,
}

/// One bottom-up meta-module and its exit connectors towards the coarser scale.
#[derive(Clone)]
pub struct BuMeta<S: Scalar> {
    pub modules: Vec<BuModule<S>>,
    pub exit: Vec<Connector<S>>,
}

/// A complete bottom-up path: read-in, meta-modules finest to coarsest, and
/// the linear readout producing the q(z0 | .) or p(z0 | known) parameters.
#[derive(Clone)]
pub struct BuPath<S: Scalar> {
    pub read_in: ReadIn<S>,
    pub metas: Vec<BuMeta<S>>,
    pub z0_readout: Dense<S>,
}

/// One top-down meta-module and its exit connectors towards the finer scale.
#[derive(Clone)]
pub struct TdMeta<S: Scalar> {
    pub modules: Vec<TdModule<S>>,
    pub exit: Vec<Connector<S>>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum StartShape {
    Fc,
    Spatial { channels: usize, hw: usize },
}

/// Top-down path: start projection from z0, meta-modules coarsest to finest,
/// and the upsampling chain back to input resolution.
#[derive(Clone)]
pub struct TdPath<S: Scalar> {
    pub start: Dense<S>,
    pub(crate) start_shape: StartShape,
    pub metas: Vec<TdMeta<S>>,
    pub read_out_ups: Vec<Connector<S>>,
}

/// Merge path aligned with the TD path.
#[derive(Clone)]
pub struct MergePath<S: Scalar> {
    pub metas: Vec<MergeMeta<S>>,
    /// Merge-state dims (without batch) at the coarsest scale.
    pub(crate) init_tail: Vec<usize>,
}

#[derive(Clone)]
pub struct MergeMeta<S: Scalar> {
    pub modules: Vec<MergeModule<S>>,
    pub exit: Vec<Connector<S>>,
}

/// Output head: a single parameter convolution, or the autoregressive stack.
#[derive(Clone)]
pub enum OutputHead<S: Scalar> {
    Factorized(Conv<S>),
    Ar(ArHead<S>),
}

/// Prior over z0.
#[derive(Clone)]
pub enum Prior<S: Scalar> {
    Standard,
    Mixture(MixturePrior<S>),
}

/// A Matryoshka Network.
#[derive(Clone)]
pub struct MatNet<S: Scalar> {
    pub cfg: ModelConfig,
    pub(crate) scales: Vec<ScaleInfo>,
    pub bu_inf: BuPath<S>,
    pub bu_gen: Option<BuPath<S>>,
    pub td: TdPath<S>,
    pub merges_inf: MergePath<S>,
    pub merges_gen: Option<MergePath<S>>,
    pub prior: Prior<S>,
    pub head: OutputHead<S>,
}

const KERNEL: usize = 3;

fn halvings(from: usize, to: usize) -> usize {
    let mut n = 0;
    let mut cur = from;
    while cur > to {
        cur /= 2;
        n += 1;
    }
    n
}

fn build_read_in<S: Scalar>(rng: &Rng, name: &str, in_c: usize, cfg: &ModelConfig, scales: &[ScaleInfo]) -> ReadIn<S> {
    match &scales[0] {
        ScaleInfo::Spatial { hw, channels, .. } => {
            let conv0 = Conv::kaiming(rng, &format!("{name}.conv0"), *channels, in_c, KERNEL, 1.0);
            let mut downs = Vec::new();
            for di in 0..halvings(cfg.input_h, *hw) {
                downs.push(Connector::Down(Conv::kaiming(
                    rng,
                    &format!("{name}.down{di}"),
                    *channels,
                    *channels,
                    KERNEL,
                    1.0,
                )));
            }
            ReadIn { conv0, downs }
        }
        // FC-only model: full-resolution read-in conv, then flatten to width.
        ScaleInfo::Fc { width, .. } => {
            let c = cfg.input_c_stand_in();
            let conv0 = Conv::kaiming(rng, &format!("{name}.conv0"), c, in_c, KERNEL, 1.0);
            let flatten = Connector::SpatialToFc(Dense::kaiming(
                rng,
                &format!("{name}.down0"),
                *width,
                c * cfg.input_h * cfg.input_w,
                1.0,
            ));
            ReadIn { conv0, downs: vec![flatten] }
        }
    }
}

impl ModelConfig {
    /// Channel width used when the model has no spatial scale at all.
    pub(crate) fn input_c_stand_in(&self) -> usize {
        self.input_channels.max(4)
    }
}

fn scale_width(info: &ScaleInfo) -> usize {
    match info {
        ScaleInfo::Spatial { hw, channels, .. } => channels * hw * hw,
        ScaleInfo::Fc { width, .. } => *width,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_bu_path<S: Scalar>(
    rng: &Rng,
    name: &str,
    in_c: usize,
    cfg: &ModelConfig,
    scales: &[ScaleInfo],
) -> BuPath<S> {
    let read_in = build_read_in(rng, &format!("{name}.read_in"), in_c, cfg, scales);
    let mut metas = Vec::new();
    for (si, info) in scales.iter().enumerate() {
        let mut modules = Vec::new();
        for mi in 0..info.modules() {
            let mod_name = format!("{name}.meta{si}.mod{mi}");
            modules.push(match info {
                ScaleInfo::Spatial { channels, .. } => BuModule::new_conv(rng, &mod_name, *channels, KERNEL),
                ScaleInfo::Fc { width, .. } => BuModule::new_fc(rng, &mod_name, *width),
            });
        }
        let mut exit = Vec::new();
        if si + 1 < scales.len() {
            match (&scales[si], &scales[si + 1]) {
                (ScaleInfo::Spatial { hw, channels, .. }, ScaleInfo::Spatial { hw: hw2, channels: c2, .. }) => {
                    let steps = halvings(*hw, *hw2);
                    let mut cur_c = *channels;
                    for sti in 0..steps {
                        let out_c = if sti == steps - 1 { *c2 } else { *channels };
                        exit.push(Connector::Down(Conv::kaiming(
                            rng,
                            &format!("{name}.meta{si}.exit{sti}"),
                            out_c,
                            cur_c,
                            KERNEL,
                            1.0,
                        )));
                        cur_c = out_c;
                    }
                }
                (ScaleInfo::Spatial { hw, channels, .. }, ScaleInfo::Fc { width, .. }) => {
                    exit.push(Connector::SpatialToFc(Dense::kaiming(
                        rng,
                        &format!("{name}.meta{si}.exit0"),
                        *width,
                        channels * hw * hw,
                        1.0,
                    )));
                }
                (ScaleInfo::Fc { .. }, _) => unreachable!("validated: fc scale is coarsest"),
            }
        }
        metas.push(BuMeta { modules, exit });
    }
    let final_width = scale_width(scales.last().expect("validated: at least one scale"));
    let z0_readout = Dense::zeros(2 * cfg.z0_dim, final_width);
    BuPath { read_in, metas, z0_readout }
}

fn build_td_path<S: Scalar>(rng: &Rng, cfg: &ModelConfig, scales: &[ScaleInfo]) -> TdPath<S> {
    let name = "td";
    let coarsest = scales.last().expect("validated");
    let start_width = scale_width(coarsest);
    let start = Dense::kaiming(rng, &format!("{name}.start"), start_width, cfg.z0_dim, 1.0);
    let start_shape = match coarsest {
        ScaleInfo::Fc { .. } => StartShape::Fc,
        ScaleInfo::Spatial { hw, channels, .. } => StartShape::Spatial { channels: *channels, hw: *hw },
    };

    let mut metas = Vec::new();
    // TD runs coarsest -> finest
    for (ti, info) in scales.iter().rev().enumerate() {
        let si = scales.len() - 1 - ti;
        let mut modules = Vec::new();
        for mi in 0..info.modules() {
            let mod_name = format!("{name}.meta{ti}.mod{mi}");
            modules.push(match info {
                ScaleInfo::Spatial { channels, .. } => {
                    TdModule::Conv(crate::layers::TdConv::new(rng, &mod_name, *channels, cfg.latent_channels, KERNEL))
                }
                ScaleInfo::Fc { width, .. } => {
                    TdModule::Fc(crate::layers::TdGru::new(rng, &mod_name, *width, cfg.latent_fc))
                }
            });
        }
        let mut exit = Vec::new();
        if si > 0 {
            // connector towards the finer scale si-1
            match (info, &scales[si - 1]) {
                (ScaleInfo::Fc { width, .. }, ScaleInfo::Spatial { hw, channels, .. }) => {
                    exit.push(Connector::FcToSpatial {
                        dense: Dense::kaiming(
                            rng,
                            &format!("{name}.meta{ti}.exit0"),
                            channels * hw * hw,
                            *width,
                            1.0,
                        ),
                        channels: *channels,
                        h: *hw,
                        w: *hw,
                    });
                }
                (ScaleInfo::Spatial { hw, channels, .. }, ScaleInfo::Spatial { hw: fine_hw, channels: fine_c, .. }) => {
                    let steps = halvings(*fine_hw, *hw);
                    let mut cur_c = *channels;
                    for sti in 0..steps {
                        let out_c = if sti == steps - 1 { *fine_c } else { *channels };
                        exit.push(Connector::Up(Conv::kaiming(
                            rng,
                            &format!("{name}.meta{ti}.exit{sti}"),
                            out_c,
                            cur_c,
                            KERNEL,
                            1.0,
                        )));
                        cur_c = out_c;
                    }
                }
                (ScaleInfo::Fc { .. }, ScaleInfo::Fc { .. }) => unreachable!("validated: single fc scale"),
                (ScaleInfo::Spatial { .. }, ScaleInfo::Fc { .. }) => {
                    unreachable!("validated: fc scale is coarsest")
                }
            }
        }
        metas.push(TdMeta { modules, exit });
    }

    // upsample chain from the finest scale back to input resolution
    let mut read_out_ups = Vec::new();
    match &scales[0] {
        ScaleInfo::Spatial { hw, channels, .. } => {
            for ui in 0..halvings(cfg.input_h, *hw) {
                read_out_ups.push(Connector::Up(Conv::kaiming(
                    rng,
                    &format!("{name}.readout.up{ui}"),
                    *channels,
                    *channels,
                    KERNEL,
                    1.0,
                )));
            }
        }
        ScaleInfo::Fc { width, .. } => {
            let c = cfg.input_c_stand_in();
            read_out_ups.push(Connector::FcToSpatial {
                dense: Dense::kaiming(
                    rng,
                    &format!("{name}.readout.up0"),
                    c * cfg.input_h * cfg.input_w,
                    *width,
                    1.0,
                ),
                channels: c,
                h: cfg.input_h,
                w: cfg.input_w,
            });
        }
    }
    TdPath { start, start_shape, metas, read_out_ups }
}

fn build_merge_path<S: Scalar>(rng: &Rng, name: &str, cfg: &ModelConfig, scales: &[ScaleInfo]) -> MergePath<S> {
    let mut metas = Vec::new();
    for (ti, info) in scales.iter().rev().enumerate() {
        let si = scales.len() - 1 - ti;
        let mut modules = Vec::new();
        for mi in 0..info.modules() {
            let mod_name = format!("{name}.meta{ti}.mod{mi}");
            modules.push(match info {
                ScaleInfo::Spatial { channels, .. } => MergeModule::new_conv(
                    rng,
                    &mod_name,
                    *channels,
                    *channels,
                    *channels,
                    cfg.latent_channels,
                    KERNEL,
                ),
                ScaleInfo::Fc { width, .. } => MergeModule::new_fc(rng, &mod_name, *width, *width, *width, cfg.latent_fc),
            });
        }
        let mut exit = Vec::new();
        if si > 0 {
            match (info, &scales[si - 1]) {
                (ScaleInfo::Fc { width, .. }, ScaleInfo::Spatial { hw, channels, .. }) => {
                    exit.push(Connector::FcToSpatial {
                        dense: Dense::kaiming(
                            rng,
                            &format!("{name}.meta{ti}.exit0"),
                            channels * hw * hw,
                            *width,
                            1.0,
                        ),
                        channels: *channels,
                        h: *hw,
                        w: *hw,
                    });
                }
                (ScaleInfo::Spatial { hw, channels, .. }, ScaleInfo::Spatial { hw: fine_hw, channels: fine_c, .. }) => {
                    let steps = halvings(*fine_hw, *hw);
                    let mut cur_c = *channels;
                    for sti in 0..steps {
                        let out_c = if sti == steps - 1 { *fine_c } else { *channels };
                        exit.push(Connector::Up(Conv::kaiming(
                            rng,
                            &format!("{name}.meta{ti}.exit{sti}"),
                            out_c,
                            cur_c,
                            KERNEL,
                            1.0,
                        )));
                        cur_c = out_c;
                    }
                }
                _ => unreachable!("validated scale order"),
            }
        }
        metas.push(MergeMeta { modules, exit });
    }
    let init_tail = match scales.last().expect("validated") {
        ScaleInfo::Fc { width, .. } => vec![*width],
        ScaleInfo::Spatial { hw, channels, .. } => vec![*channels, *hw, *hw],
    };
    MergePath { metas, init_tail }
}

impl<S: Scalar> MatNet<S> {
    /// Build a network with randomly initialized parameters. Readout layers
    /// for latent distributions start at zero, so every initial prior and
    /// posterior is N(0, 1).
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(seed, 0x1417);
        let scales = resolve_scales(cfg);
        let c = cfg.input_channels;
        let aux = cfg.gen_aux_channels();

        let inf_in_c = if cfg.conditional { 3 * c + aux } else { c };
        let bu_inf = build_bu_path(&rng, "bu_inf", inf_in_c, cfg, &scales);
        let bu_gen = if cfg.conditional {
            Some(build_bu_path(&rng, "bu_gen", 2 * c + aux, cfg, &scales))
        } else {
            None
        };
        let td = build_td_path(&rng, cfg, &scales);
        let merges_inf = build_merge_path(&rng, "merge_inf", cfg, &scales);
        let merges_gen = if cfg.conditional {
            Some(build_merge_path(&rng, "merge_gen", cfg, &scales))
        } else {
            None
        };

        let prior = match cfg.prior {
            PriorSpec::Standard => Prior::Standard,
            PriorSpec::Mixture { k } => {
                let mut comps = Vec::with_capacity(k);
                let mut comp_rng = rng.split_named("prior.components");
                for _ in 0..k {
                    let mu = Tensor::randn(&[1, cfg.z0_dim], 0.5, &mut comp_rng);
                    let lv = Tensor::zeros(&[1, cfg.z0_dim]);
                    comps.push(DiagGaussian::raw(mu, lv));
                }
                Prior::Mixture(MixturePrior::new(comps)?)
            }
        };

        let finest_c = match &scales[0] {
            ScaleInfo::Spatial { channels, .. } => *channels,
            ScaleInfo::Fc { .. } => cfg.input_c_stand_in(),
        };
        let params_c = c * cfg.likelihood.params_per_channel();
        let head = if cfg.ar_head {
            OutputHead::Ar(ArHead::new(
                &rng,
                "head.ar",
                cfg.likelihood,
                c,
                finest_c,
                cfg.ar_features,
                cfg.ar_layers,
                KERNEL,
            )?)
        } else {
            OutputHead::Factorized(Conv::kaiming(&rng, "head.params", params_c, finest_c, KERNEL, 0.1))
        };

        Ok(MatNet {
            cfg: cfg.clone(),
            scales,
            bu_inf,
            bu_gen,
            td,
            merges_inf,
            merges_gen,
            prior,
            head,
        })
    }

    /// Build with every parameter set to zero: the analytic neutral state.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.for_each_param_mut(&mut |_, _, t| {
            *t = Tensor::zeros(t.dims());
        });
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth()
    }

    /// Labels for z0 plus every TD module layer, in inference order.
    pub fn layer_labels(&self) -> Vec<String> {
        let mut labels = vec!["z0".to_string()];
        for info in self.scales.iter().rev() {
            for mi in 0..info.modules() {
                labels.push(format!("{}.m{mi}", info.label()));
            }
        }
        labels
    }

    /// Visit every parameter with its canonical name and group.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, ParamGroup, &'a Tensor<S>)) {
        {
            let g = ParamGroup::BuInf;
            let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
            visit_bu(&self.bu_inf, "bu_inf", &mut v);
        }
        if let Some(bu) = &self.bu_gen {
            let g = ParamGroup::BuGen;
            let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
            visit_bu(bu, "bu_gen", &mut v);
        }
        {
            let g = ParamGroup::TdGen;
            let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
            visit_td(&self.td, "td", &mut v);
        }
        {
            let g = ParamGroup::MergeInf;
            let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
            visit_merge(&self.merges_inf, "merge_inf", &mut v);
        }
        if let Some(m) = &self.merges_gen {
            let g = ParamGroup::MergeGen;
            let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
            visit_merge(m, "merge_gen", &mut v);
        }
        if let Prior::Mixture(mix) = &self.prior {
            for (ci, comp) in mix.components().iter().enumerate() {
                f(format!("prior.comp{ci}.mu"), ParamGroup::Prior, comp.mu());
                f(format!("prior.comp{ci}.log_var"), ParamGroup::Prior, comp.log_var());
            }
        }
        match &self.head {
            OutputHead::Factorized(conv) => {
                let g = ParamGroup::TdGen;
                let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
                conv.visit("head.params", &mut v);
            }
            OutputHead::Ar(head) => {
                let g = ParamGroup::ArHead;
                let mut v = |n: String, t: &'a Tensor<S>| f(n, g, t);
                head.visit("head.ar", &mut v);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, ParamGroup, &mut Tensor<S>)) {
        {
            let g = ParamGroup::BuInf;
            let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
            visit_bu_mut(&mut self.bu_inf, "bu_inf", &mut v);
        }
        if let Some(bu) = &mut self.bu_gen {
            let g = ParamGroup::BuGen;
            let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
            visit_bu_mut(bu, "bu_gen", &mut v);
        }
        {
            let g = ParamGroup::TdGen;
            let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
            visit_td_mut(&mut self.td, "td", &mut v);
        }
        {
            let g = ParamGroup::MergeInf;
            let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
            visit_merge_mut(&mut self.merges_inf, "merge_inf", &mut v);
        }
        if let Some(m) = &mut self.merges_gen {
            let g = ParamGroup::MergeGen;
            let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
            visit_merge_mut(m, "merge_gen", &mut v);
        }
        if let Prior::Mixture(mix) = &mut self.prior {
            for (ci, comp) in mix.components_mut().iter_mut().enumerate() {
                f(format!("prior.comp{ci}.mu"), ParamGroup::Prior, comp.mu_mut());
                f(format!("prior.comp{ci}.log_var"), ParamGroup::Prior, comp.log_var_mut());
            }
        }
        match &mut self.head {
            OutputHead::Factorized(conv) => {
                let g = ParamGroup::TdGen;
                let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
                conv.visit_mut("head.params", &mut v);
            }
            OutputHead::Ar(head) => {
                let g = ParamGroup::ArHead;
                let mut v = |n: String, t: &mut Tensor<S>| f(n, g, t);
                head.visit_mut("head.ar", &mut v);
            }
        }
    }

    /// Named parameters in name order.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, Tensor<S>)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |n, g, t| out.push((n, g, t.clone())));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, _, t| n += t.numel());
        n
    }

    /// Clone with every generator-side parameter replaced by a detached copy:
    /// gradients from losses built on the clone reach only inference-side
    /// parameters.
    pub fn inference_only_view(&self) -> MatNet<S> {
        let mut view = self.clone();
        view.for_each_param_mut(&mut |_, g, t| {
            if !g.is_inference_side() {
                *t = t.detach();
            }
        });
        view
    }

    /// Serialize to a named-tensor archive. The first entry is a manifest
    /// recording the model config as canonical key=value text; `extras` (for
    /// example optimizer state) are appended after the parameters.
    pub fn save(&self, path: &std::path::Path, extras: &[(String, Tensor<S>)]) -> Result<()> {
        let manifest_text = self.cfg.to_text();
        let manifest = Tensor::from_vec(
            manifest_text.bytes().map(|b| S::of(b as f64)).collect(),
            &[manifest_text.len()],
        );
        let mut entries = vec![("__manifest".to_string(), manifest)];
        for (name, _, t) in self.named_params() {
            entries.push((name, t));
        }
        entries.extend(extras.iter().cloned());
        io::save_archive(path, &entries)
    }

    /// Load a checkpoint: rebuilds the architecture from the manifest, then
    /// fills every named parameter, verifying shape agreement. Returns the
    /// network and any extra entries.
    pub fn load(path: &std::path::Path) -> Result<(MatNet<S>, Vec<(String, Tensor<S>)>)> {
        let entries = io::load_archive::<S>(path)?;
        let Some((_, manifest)) = entries.iter().find(|(n, _)| n == "__manifest") else {
            return Err(Error::Format { what: "checkpoint", msg: "missing __manifest entry".into() });
        };
        let bytes: Vec<u8> = manifest.data().iter().map(|v| v.as_f64() as u8).collect();
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Format { what: "checkpoint", msg: format!("manifest not UTF-8: {e}") })?;
        let cfg = ModelConfig::from_text(&text)?;
        let mut net = MatNet::new(&cfg, 0)?;

        let mut by_name: std::collections::HashMap<&str, &Tensor<S>> = std::collections::HashMap::new();
        for (n, t) in &entries {
            by_name.insert(n.as_str(), t);
        }
        let mut missing = Vec::new();
        net.for_each_param_mut(&mut |name, _, t| match by_name.get(name.as_str()) {
            Some(loaded) => {
                if loaded.dims() == t.dims() {
                    *t = (*loaded).clone();
                } else {
                    missing.push(format!("{name}: shape {:?} vs expected {:?}", loaded.dims(), t.dims()));
                }
            }
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(Error::Format {
                what: "checkpoint",
                msg: format!("parameter mismatches: {}", missing.join("; ")),
            });
        }

        let param_names: std::collections::HashSet<String> =
            net.named_params().into_iter().map(|(n, _, _)| n).collect();
        let extras = entries
            .into_iter()
            .filter(|(n, _)| n != "__manifest" && !param_names.contains(n))
            .collect();
        Ok((net, extras))
    }
}

fn visit_bu<'a, S: Scalar>(bu: &'a BuPath<S>, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
    bu.read_in.conv0.visit(&format!("{prefix}.read_in.conv0"), f);
    for (di, d) in bu.read_in.downs.iter().enumerate() {
        d.visit(&format!("{prefix}.read_in.down{di}"), f);
    }
    for (si, meta) in bu.metas.iter().enumerate() {
        for (mi, m) in meta.modules.iter().enumerate() {
            m.visit(&format!("{prefix}.meta{si}.mod{mi}"), f);
        }
        for (ei, e) in meta.exit.iter().enumerate() {
            e.visit(&format!("{prefix}.meta{si}.exit{ei}"), f);
        }
    }
    bu.z0_readout.visit(&format!("{prefix}.z0"), f);
}

fn visit_bu_mut<S: Scalar>(bu: &mut BuPath<S>, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
    bu.read_in.conv0.visit_mut(&format!("{prefix}.read_in.conv0"), f);
    for (di, d) in bu.read_in.downs.iter_mut().enumerate() {
        d.visit_mut(&format!("{prefix}.read_in.down{di}"), f);
    }
    for (si, meta) in bu.metas.iter_mut().enumerate() {
        for (mi, m) in meta.modules.iter_mut().enumerate() {
            m.visit_mut(&format!("{prefix}.meta{si}.mod{mi}"), f);
        }
        for (ei, e) in meta.exit.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.meta{si}.exit{ei}"), f);
        }
    }
    bu.z0_readout.visit_mut(&format!("{prefix}.z0"), f);
}

fn visit_td<'a, S: Scalar>(td: &'a TdPath<S>, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
    td.start.visit(&format!("{prefix}.start"), f);
    for (ti, meta) in td.metas.iter().enumerate() {
        for (mi, m) in meta.modules.iter().enumerate() {
            m.visit(&format!("{prefix}.meta{ti}.mod{mi}"), f);
        }
        for (ei, e) in meta.exit.iter().enumerate() {
            e.visit(&format!("{prefix}.meta{ti}.exit{ei}"), f);
        }
    }
    for (ui, u) in td.read_out_ups.iter().enumerate() {
        u.visit(&format!("{prefix}.readout.up{ui}"), f);
    }
}

fn visit_td_mut<S: Scalar>(td: &mut TdPath<S>, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
    td.start.visit_mut(&format!("{prefix}.start"), f);
    for (ti, meta) in td.metas.iter_mut().enumerate() {
        for (mi, m) in meta.modules.iter_mut().enumerate() {
            m.visit_mut(&format!("{prefix}.meta{ti}.mod{mi}"), f);
        }
        for (ei, e) in meta.exit.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.meta{ti}.exit{ei}"), f);
        }
    }
    for (ui, u) in td.read_out_ups.iter_mut().enumerate() {
        u.visit_mut(&format!("{prefix}.readout.up{ui}"), f);
    }
}

fn visit_merge<'a, S: Scalar>(mp: &'a MergePath<S>, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
    for (ti, meta) in mp.metas.iter().enumerate() {
        for (mi, m) in meta.modules.iter().enumerate() {
            m.visit(&format!("{prefix}.meta{ti}.mod{mi}"), f);
        }
        for (ei, e) in meta.exit.iter().enumerate() {
            e.visit(&format!("{prefix}.meta{ti}.exit{ei}"), f);
        }
    }
}

fn visit_merge_mut<S: Scalar>(mp: &mut MergePath<S>, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
    for (ti, meta) in mp.metas.iter_mut().enumerate() {
        for (mi, m) in meta.modules.iter_mut().enumerate() {
            m.visit_mut(&format!("{prefix}.meta{ti}.mod{mi}"), f);
        }
        for (ei, e) in meta.exit.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.meta{ti}.exit{ei}"), f);
        }
    }
}
