//! Model and training configuration, plus the flat key=value text codec used
//! by config files, run-directory echoes, and checkpoint manifests.
//!
//! Format: one `key=value` per line, `#` starts a comment, unknown keys are
//! hard errors. Serialization is canonical (fixed key order), so an echoed
//! config is byte-stable.

use std::collections::BTreeMap;

use crate::dist::LikelihoodKind;
use crate::error::{Error, Result};

/// One scale of the network, listed finest-to-coarsest in the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScaleSpec {
    /// Square spatial scale at the given resolution.
    Spatial { hw: usize },
    /// Fully-connected scale of the given width.
    Fc { width: usize },
}

/// Prior over the top latent variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSpec {
    Standard,
    Mixture { k: usize },
}

/// Architecture configuration. `scales`, `channels`, and `modules` are
/// aligned: `channels` has one entry per spatial scale, `modules` one entry
/// per scale (including the FC scale).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Finest to coarsest.
    pub scales: Vec<ScaleSpec>,
    /// Feature channels per spatial scale (same order as `scales`).
    pub channels: Vec<usize>,
    /// Module count per scale (same order as `scales`).
    pub modules: Vec<usize>,
    /// Latent feature maps per spatial TD module.
    pub latent_channels: usize,
    /// Latent dimension per FC TD module.
    pub latent_fc: usize,
    /// Dimension of the top latent z0.
    pub z0_dim: usize,
    pub likelihood: LikelihoodKind,
    pub prior: PriorSpec,
    pub conditional: bool,
    /// Second imputation stage: the generator side receives the first
    /// stage's fill as extra input channels.
    pub stage2: bool,
    pub ar_head: bool,
    pub ar_layers: usize,
    pub ar_features: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("scales must list at least one scale".into()));
        }
        let n_spatial = self.scales.iter().filter(|s| matches!(s, ScaleSpec::Spatial { .. })).count();
        let n_fc = self.scales.len() - n_spatial;
        if n_fc > 1 {
            return Err(Error::Config("at most one fc scale is supported".into()));
        }
        if n_fc == 1 && !matches!(self.scales.last(), Some(ScaleSpec::Fc { .. })) {
            return Err(Error::Config("the fc scale must be the coarsest (listed last)".into()));
        }
        if self.channels.len() != n_spatial {
            return Err(Error::Config(format!(
                "channels lists {} entries for {} spatial scales",
                self.channels.len(),
                n_spatial
            )));
        }
        if self.modules.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "modules lists {} entries for {} scales",
                self.modules.len(),
                self.scales.len()
            )));
        }
        if self.modules.iter().any(|&m| m == 0) {
            return Err(Error::Config("every scale needs at least one module".into()));
        }
        // spatial chain: input halves down to the finest scale, then on down
        let mut prev = (self.input_h, self.input_w);
        for s in &self.scales {
            if let ScaleSpec::Spatial { hw } = s {
                while prev.0 > *hw {
                    if prev.0 % 2 != 0 || prev.1 % 2 != 0 {
                        return Err(Error::Config(format!(
                            "cannot halve {}x{} on the way to scale {hw}",
                            prev.0, prev.1
                        )));
                    }
                    prev = (prev.0 / 2, prev.1 / 2);
                }
                if prev.0 != *hw || prev.1 != *hw {
                    return Err(Error::Config(format!(
                        "scale {hw} is not reachable from {}x{} by halving",
                        self.input_h, self.input_w
                    )));
                }
            }
        }
        if self.conditional && matches!(self.prior, PriorSpec::Mixture { .. }) {
            return Err(Error::Config("mixture prior applies to unconditional models only".into()));
        }
        if self.stage2 && !self.conditional {
            return Err(Error::Config("stage2 requires conditional=true".into()));
        }
        if let PriorSpec::Mixture { k } = self.prior {
            if k == 0 {
                return Err(Error::Config("mixture prior needs k >= 1".into()));
            }
        }
        if self.ar_head && self.ar_layers == 0 {
            return Err(Error::Config("ar_layers must be >= 1".into()));
        }
        Ok(())
    }

    /// Total TD module count (network depth d).
    pub fn depth(&self) -> usize {
        self.modules.iter().sum()
    }

    /// Extra generator-side input channels (stage-2 fill).
    pub fn gen_aux_channels(&self) -> usize {
        if self.stage2 {
            self.input_channels
        } else {
            0
        }
    }
}

/// Mask specification for conditional tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSpec {
    None,
    /// Fixed number of known quadrants (1..=3), chosen at random per image.
    Quadrants { known: usize },
    /// Known quadrant count drawn uniformly from {1,2,3} per image.
    QuadrantsRandom,
    /// Square occluders of the given size placed uniformly at random.
    Occluders { count: usize, size: usize },
    /// Mask loaded from an MTN1 tensor file.
    File(String),
}

/// Binarization mode for [0,1] data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinarizeMode {
    None,
    /// Per-epoch Bernoulli resampling.
    Dynamic,
    /// One-shot threshold at 0.5 (stand-in for the canonical fixed split).
    FixedThreshold,
}

/// Training-loop configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub mc_samples: usize,
    /// Weight of the inference regularizer; 0 disables it.
    pub lambda_q: f64,
    /// Weight of the mixture-responsibility entropy penalty.
    pub entropy_weight: f64,
    /// Evaluate on the held-out split every this many updates; 0 disables.
    pub eval_every: usize,
    /// Write a checkpoint every this many updates; 0 = end of training only.
    pub ckpt_every: usize,
    pub seed: u64,
    pub iwae_k_eval: usize,
    pub binarize: BinarizeMode,
    pub dequantize: bool,
    pub val_fraction: f64,
    pub mask: MaskSpec,
    /// Linear KL warm-up over this many updates; 0 keeps the bound exact.
    pub kl_warmup_updates: usize,
    /// Use hard output samples instead of the likelihood mean when drawing
    /// regularizer inputs.
    pub reg_hard_sample: bool,
    pub threads: usize,
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-4,
            clip_norm: 5.0,
            mc_samples: 1,
            lambda_q: 0.0,
            entropy_weight: 0.0,
            eval_every: 0,
            ckpt_every: 0,
            seed: 1,
            iwae_k_eval: 100,
            binarize: BinarizeMode::None,
            dequantize: false,
            val_fraction: 0.1,
            mask: MaskSpec::None,
            kl_warmup_updates: 0,
            reg_hard_sample: false,
            threads: 0,
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("epochs, batch_size, mc_samples must be positive".into()));
        }
        if self.lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0,1)".into()));
        }
        if self.lambda_q < 0.0 || self.entropy_weight < 0.0 {
            return Err(Error::Config("lambda_q and entropy_weight must be nonnegative".into()));
        }
        if self.iwae_k_eval == 0 {
            return Err(Error::Config("iwae_k_eval must be positive".into()));
        }
        if let MaskSpec::Quadrants { known } = self.mask {
            if !(1..=3).contains(&known) {
                return Err(Error::Config("quadrants known count must be 1..=3".into()));
            }
        }
        Ok(())
    }
}

/// Model + training configuration as one flat key namespace.
#[derive(Clone, Debug, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const MODEL_KEYS: &[&str] = &[
    "input",
    "scales",
    "channels",
    "modules",
    "latent_channels",
    "latent_fc",
    "z0_dim",
    "likelihood",
    "prior",
    "conditional",
    "stage2",
    "ar_head",
    "ar_layers",
    "ar_features",
];

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "clip_norm",
    "mc_samples",
    "lambda_q",
    "entropy_weight",
    "eval_every",
    "ckpt_every",
    "seed",
    "iwae_k_eval",
    "binarize",
    "dequantize",
    "val_fraction",
    "mask",
    "kl_warmup_updates",
    "reg_hard_sample",
    "threads",
    "checked",
];

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1)));
        };
        let key = k.trim().to_string();
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str, default: usize) -> Result<usize> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected integer, got `{v}`"))),
    }
}

fn parse_f64(map: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected number, got `{v}`"))),
    }
}

fn parse_bool(map: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match map.get(key).map(|s| s.as_str()) {
        None => Ok(default),
        Some("true") | Some("1") => Ok(true),
        Some("false") | Some("0") => Ok(false),
        Some(v) => Err(Error::Config(format!("key `{key}`: expected true/false, got `{v}`"))),
    }
}

fn require<'m>(map: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

fn parse_usize_list(v: &str, key: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad integer `{p}`")))
        })
        .collect()
}

impl FullConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        Self::from_map(map)
    }

    /// Apply `key=value` overrides on top of an existing text config.
    pub fn from_text_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = parse_kv(text)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !MODEL_KEYS.contains(&key.as_str()) && !TRAIN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let model = Self::model_from_map(&map)?;
        let train = Self::train_from_map(&map)?;
        model.validate()?;
        train.validate()?;
        Ok(FullConfig { model, train })
    }

    fn model_from_map(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let input = require(map, "input")?;
        let parts: Vec<&str> = input.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("key `input`: expected CxHxW, got `{input}`")));
        }
        let dims: Vec<usize> = parts
            .iter()
            .map(|p| p.parse().map_err(|_| Error::Config(format!("key `input`: bad dim `{p}`"))))
            .collect::<Result<_>>()?;

        let scales_text = require(map, "scales")?;
        let mut scales = Vec::new();
        for part in scales_text.split(',') {
            let part = part.trim();
            if let Some(width) = part.strip_prefix("fc:") {
                let width = width
                    .parse()
                    .map_err(|_| Error::Config(format!("key `scales`: bad fc width `{part}`")))?;
                scales.push(ScaleSpec::Fc { width });
            } else {
                let hw = part
                    .parse()
                    .map_err(|_| Error::Config(format!("key `scales`: bad scale `{part}`")))?;
                scales.push(ScaleSpec::Spatial { hw });
            }
        }

        let channels = parse_usize_list(require(map, "channels")?, "channels")?;
        let modules = parse_usize_list(require(map, "modules")?, "modules")?;

        let likelihood = match map.get("likelihood").map(|s| s.as_str()).unwrap_or("bernoulli") {
            "bernoulli" => LikelihoodKind::Bernoulli,
            "gaussian" => LikelihoodKind::DiagGaussian,
            "logistic" => LikelihoodKind::IntegratedLogistic,
            v => return Err(Error::Config(format!("key `likelihood`: unknown kind `{v}`"))),
        };

        let prior = match map.get("prior").map(|s| s.as_str()).unwrap_or("standard") {
            "standard" => PriorSpec::Standard,
            v => {
                if let Some(k) = v.strip_prefix("mixture:") {
                    let k = k
                        .parse()
                        .map_err(|_| Error::Config(format!("key `prior`: bad mixture size `{v}`")))?;
                    PriorSpec::Mixture { k }
                } else {
                    return Err(Error::Config(format!("key `prior`: unknown kind `{v}`")));
                }
            }
        };

        Ok(ModelConfig {
            input_channels: dims[0],
            input_h: dims[1],
            input_w: dims[2],
            scales,
            channels,
            modules,
            latent_channels: parse_usize(map, "latent_channels", 2)?,
            latent_fc: parse_usize(map, "latent_fc", 32)?,
            z0_dim: parse_usize(map, "z0_dim", 32)?,
            likelihood,
            prior,
            conditional: parse_bool(map, "conditional", false)?,
            stage2: parse_bool(map, "stage2", false)?,
            ar_head: parse_bool(map, "ar_head", false)?,
            ar_layers: parse_usize(map, "ar_layers", 5)?,
            ar_features: parse_usize(map, "ar_features", 16)?,
        })
    }

    fn train_from_map(map: &BTreeMap<String, String>) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let binarize = match map.get("binarize").map(|s| s.as_str()).unwrap_or("none") {
            "none" => BinarizeMode::None,
            "dynamic" => BinarizeMode::Dynamic,
            "fixed" => BinarizeMode::FixedThreshold,
            v => return Err(Error::Config(format!("key `binarize`: unknown mode `{v}`"))),
        };
        let mask = match map.get("mask").map(|s| s.as_str()).unwrap_or("none") {
            "none" => MaskSpec::None,
            "quadrants:random" => MaskSpec::QuadrantsRandom,
            v => {
                if let Some(q) = v.strip_prefix("quadrants:") {
                    let known = q
                        .parse()
                        .map_err(|_| Error::Config(format!("key `mask`: bad quadrant count `{v}`")))?;
                    MaskSpec::Quadrants { known }
                } else if let Some(spec) = v.strip_prefix("occluders:") {
                    let (count, size) = spec
                        .split_once('x')
                        .ok_or_else(|| Error::Config(format!("key `mask`: expected occluders:NxS, got `{v}`")))?;
                    MaskSpec::Occluders {
                        count: count
                            .parse()
                            .map_err(|_| Error::Config(format!("key `mask`: bad count in `{v}`")))?,
                        size: size
                            .parse()
                            .map_err(|_| Error::Config(format!("key `mask`: bad size in `{v}`")))?,
                    }
                } else if let Some(path) = v.strip_prefix("file:") {
                    MaskSpec::File(path.to_string())
                } else {
                    return Err(Error::Config(format!("key `mask`: unknown spec `{v}`")));
                }
            }
        };
        Ok(TrainConfig {
            epochs: parse_usize(map, "epochs", d.epochs)?,
            batch_size: parse_usize(map, "batch_size", d.batch_size)?,
            lr: parse_f64(map, "lr", d.lr)?,
            clip_norm: parse_f64(map, "clip_norm", d.clip_norm)?,
            mc_samples: parse_usize(map, "mc_samples", d.mc_samples)?,
            lambda_q: parse_f64(map, "lambda_q", d.lambda_q)?,
            entropy_weight: parse_f64(map, "entropy_weight", d.entropy_weight)?,
            eval_every: parse_usize(map, "eval_every", d.eval_every)?,
            ckpt_every: parse_usize(map, "ckpt_every", d.ckpt_every)?,
            seed: parse_usize(map, "seed", 1)? as u64,
            iwae_k_eval: parse_usize(map, "iwae_k_eval", d.iwae_k_eval)?,
            binarize,
            dequantize: parse_bool(map, "dequantize", d.dequantize)?,
            val_fraction: parse_f64(map, "val_fraction", d.val_fraction)?,
            mask,
            kl_warmup_updates: parse_usize(map, "kl_warmup_updates", d.kl_warmup_updates)?,
            reg_hard_sample: parse_bool(map, "reg_hard_sample", d.reg_hard_sample)?,
            threads: parse_usize(map, "threads", d.threads)?,
            checked: parse_bool(map, "checked", d.checked)?,
        })
    }

    /// Canonical text form: fixed key order, one key per line.
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_text();
        let t = &self.train;
        use std::fmt::Write;
        let _ = write!(
            out,
            "epochs={}\nbatch_size={}\nlr={}\nclip_norm={}\nmc_samples={}\nlambda_q={}\nentropy_weight={}\neval_every={}\nckpt_every={}\nseed={}\niwae_k_eval={}\nbinarize={}\ndequantize={}\nval_fraction={}\nmask={}\nkl_warmup_updates={}\nreg_hard_sample={}\nthreads={}\nchecked={}\n",
            t.epochs,
            t.batch_size,
            t.lr,
            t.clip_norm,
            t.mc_samples,
            t.lambda_q,
            t.entropy_weight,
            t.eval_every,
            t.ckpt_every,
            t.seed,
            t.iwae_k_eval,
            match t.binarize {
                BinarizeMode::None => "none",
                BinarizeMode::Dynamic => "dynamic",
                BinarizeMode::FixedThreshold => "fixed",
            },
            t.dequantize,
            t.val_fraction,
            match &t.mask {
                MaskSpec::None => "none".to_string(),
                MaskSpec::Quadrants { known } => format!("quadrants:{known}"),
                MaskSpec::QuadrantsRandom => "quadrants:random".to_string(),
                MaskSpec::Occluders { count, size } => format!("occluders:{count}x{size}"),
                MaskSpec::File(p) => format!("file:{p}"),
            },
            t.kl_warmup_updates,
            t.reg_hard_sample,
            t.threads,
            t.checked,
        );
        out
    }
}

impl ModelConfig {
    /// Canonical model-only text (stored in checkpoint manifests).
    pub fn to_text(&self) -> String {
        let scales = self
            .scales
            .iter()
            .map(|s| match s {
                ScaleSpec::Spatial { hw } => hw.to_string(),
                ScaleSpec::Fc { width } => format!("fc:{width}"),
            })
            .collect::<Vec<_>>()
            .join(",");
        let channels = self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let modules = self.modules.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input={}x{}x{}\nscales={scales}\nchannels={channels}\nmodules={modules}\nlatent_channels={}\nlatent_fc={}\nz0_dim={}\nlikelihood={}\nprior={}\nconditional={}\nstage2={}\nar_head={}\nar_layers={}\nar_features={}\n",
            self.input_channels,
            self.input_h,
            self.input_w,
            self.latent_channels,
            self.latent_fc,
            self.z0_dim,
            self.likelihood.name(),
            match self.prior {
                PriorSpec::Standard => "standard".to_string(),
                PriorSpec::Mixture { k } => format!("mixture:{k}"),
            },
            self.conditional,
            self.stage2,
            self.ar_head,
            self.ar_layers,
            self.ar_features,
        )
    }

    /// Parse a model config alone (checkpoint manifests hold only model keys).
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        for key in map.keys() {
            if !MODEL_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown model key `{key}`")));
            }
        }
        let model = FullConfig::model_from_map(&map)?;
        model.validate()?;
        Ok(model)
    }
}
