//! Optimization loop: adaptive-moment updates behind global-norm clipping,
//! seed-deterministic minibatching, per-module KL profiling, checkpointing,
//! and the structured-prediction task drivers.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{MaskSpec, TrainConfig};
use crate::data::{make_mask, Dataset};
use crate::error::{Error, Result};
use crate::model::run::Observation;
use crate::model::MatNet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::tape::{GradMap, Tape};
use crate::tensor::Tensor;

/// Adam hyperparameters plus the global-norm clip threshold.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Per-parameter first/second moment accumulators keyed by parameter name.
pub struct OptimState<S: Scalar> {
    pub hyper: AdamParams,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
    _marker: std::marker::PhantomData<S>,
}

/// What happened to one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    /// Non-finite gradients: parameters were left untouched.
    SkippedNonFinite,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(hyper: AdamParams) -> Self {
        OptimState {
            hyper,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Begin an update; returns the bias-corrected step index.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Bias-corrected adaptive-moment update of one parameter. `grad_scale`
    /// carries the global-norm clip factor.
    pub fn update(&mut self, name: &str, param: &Tensor<S>, grad: &Tensor<S>, grad_scale: f64) -> Tensor<S> {
        let n = param.numel();
        debug_assert_eq!(grad.numel(), n, "gradient shape mismatch for {name}");
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let AdamParams { lr, beta1, beta2, eps, .. } = self.hyper;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let g = grad.data()[i].as_f64() * grad_scale;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            out.push(S::of(param.data()[i].as_f64() - lr * m_hat / (v_hat.sqrt() + eps)));
        }
        Tensor::from_vec(out, param.dims())
    }

    /// Serialize moments for checkpoint extras.
    pub fn to_extras(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        out.push((
            "optim.step".to_string(),
            Tensor::from_vec(vec![S::of(self.step as f64)], &[1]),
        ));
        for (name, m) in &self.m {
            out.push((
                format!("optim.m.{name}"),
                Tensor::from_vec(m.iter().map(|x| S::of(*x)).collect(), &[m.len()]),
            ));
        }
        for (name, v) in &self.v {
            out.push((
                format!("optim.v.{name}"),
                Tensor::from_vec(v.iter().map(|x| S::of(*x)).collect(), &[v.len()]),
            ));
        }
        out
    }

    /// Restore moments from checkpoint extras.
    pub fn from_extras(hyper: AdamParams, extras: &[(String, Tensor<S>)]) -> Self {
        let mut state = Self::new(hyper);
        for (name, t) in extras {
            if name == "optim.step" {
                state.step = t.data()[0].as_f64() as u64;
            } else if let Some(p) = name.strip_prefix("optim.m.") {
                state.m.insert(p.to_string(), t.data().iter().map(|v| v.as_f64()).collect());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                state.v.insert(p.to_string(), t.data().iter().map(|v| v.as_f64()).collect());
            }
        }
        state
    }
}

/// One clipped Adam step over every parameter of the network. Gradients
/// absent from the map count as zero; any non-finite gradient skips the
/// whole update.
pub fn adam_step<S: Scalar>(net: &mut MatNet<S>, grads: &GradMap<S>, opt: &mut OptimState<S>) -> StepOutcome {
    // pass 1: finite check and global norm, in name order
    let named = net.named_params();
    let mut sq_norm = 0.0f64;
    for (_, _, t) in &named {
        if let Some(g) = grads.get(t) {
            for v in g.data() {
                let f = v.as_f64();
                if !f.is_finite() {
                    return StepOutcome::SkippedNonFinite;
                }
                sq_norm += f * f;
            }
        }
    }
    let norm = sq_norm.sqrt();
    let clip = opt.hyper.clip_norm;
    let scale = if norm > clip { clip / norm } else { 1.0 };

    opt.begin_step();
    let grad_by_id: std::collections::HashMap<crate::TensorId, Tensor<S>> = named
        .iter()
        .map(|(_, _, t)| (t.id(), grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.dims()))))
        .collect();
    net.for_each_param_mut(&mut |name, _, t| {
        let g = grad_by_id.get(&t.id()).expect("collected above");
        *t = opt.update(&name, t, g, scale);
    });
    StepOutcome::Applied { grad_norm: norm }
}

/// Clock used for the wall-time metrics column. The fixed variant keeps
/// metrics byte-identical across runs for determinism checks.
#[derive(Clone, Copy, Debug)]
pub enum Timer {
    System { start: Instant },
    Fixed,
}

impl Timer {
    pub fn system() -> Self {
        Timer::System { start: Instant::now() }
    }

    pub fn fixed() -> Self {
        Timer::Fixed
    }

    fn now_ms(&self) -> u64 {
        match self {
            Timer::System { start } => start.elapsed().as_millis() as u64,
            Timer::Fixed => 0,
        }
    }
}

/// Per-module KL means over training, grouped by meta-module labels.
pub struct KlProfile {
    pub labels: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl KlProfile {
    pub fn new(labels: Vec<String>) -> Self {
        KlProfile { labels, rows: Vec::new() }
    }

    pub fn push(&mut self, update: u64, kls: Vec<f64>) {
        debug_assert_eq!(kls.len(), self.labels.len());
        self.rows.push((update, kls));
    }

    /// CSV export: header `update,<labels>,total`; the total column equals
    /// the row sum.
    pub fn export(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Data("empty KL profile".into()));
        }
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "update")?;
        for l in &self.labels {
            write!(w, ",{l}")?;
        }
        writeln!(w, ",total")?;
        for (update, kls) in &self.rows {
            write!(w, "{update}")?;
            let mut total = 0.0;
            for v in kls {
                total += v;
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{total}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a profile CSV back, verifying the row-sum invariant.
    pub fn parse(path: &Path) -> Result<KlProfile> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty profile file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "update" || *cols.last().unwrap() != "total" {
            return Err(Error::Data(format!("bad profile header `{header}`")));
        }
        let labels: Vec<String> = cols[1..cols.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != cols.len() {
                return Err(Error::Data(format!("row {} has {} columns", ln + 2, parts.len())));
            }
            let update: u64 = parts[0].parse().map_err(|_| Error::Data(format!("bad update `{}`", parts[0])))?;
            let vals: Vec<f64> = parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| Error::Data(format!("bad value `{p}`"))))
                .collect::<Result<_>>()?;
            let (kls, total) = vals.split_at(vals.len() - 1);
            let sum: f64 = kls.iter().sum();
            if (sum - total[0]).abs() > 1e-6 * total[0].abs().max(1.0) {
                return Err(Error::Data(format!("row {}: sum {} != total {}", ln + 2, sum, total[0])));
            }
            rows.push((update, kls.to_vec()));
        }
        Ok(KlProfile { labels, rows })
    }

    /// Merge profiles with identical labels, sorted by update index.
    pub fn merge(mut profiles: Vec<KlProfile>) -> Result<KlProfile> {
        let Some(first) = profiles.first() else {
            return Err(Error::Data("nothing to merge".into()));
        };
        let labels = first.labels.clone();
        let mut rows = Vec::new();
        for p in &mut profiles {
            if p.labels != labels {
                return Err(Error::Data("profiles have different module labels".into()));
            }
            rows.append(&mut p.rows);
        }
        rows.sort_by_key(|(u, _)| *u);
        Ok(KlProfile { labels, rows })
    }
}

/// Result of a training run.
pub struct TrainSummary {
    pub updates: u64,
    pub skipped: u64,
    pub final_loss: f64,
    pub metrics_path: PathBuf,
    pub kl_profile_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// (update, validation NLL at k=1) pairs from periodic evaluation.
    pub val_history: Vec<(u64, f64)>,
}

fn write_checkpoint(net: &MatNet<f32>, opt: &OptimState<f32>, dir: &Path, tag: &str) -> Result<PathBuf> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let path = ckpt_dir.join(format!("ckpt_{tag}.mtn"));
    net.save(&path, &opt.to_extras())?;
    Ok(path)
}

/// Train a network on a dataset. Fully seed-deterministic: two runs with the
/// same seed produce byte-identical metrics and KL-profile files when given
/// a fixed timer.
///
/// A fresh run starts with `OptimState::new`; resuming passes state restored
/// from checkpoint extras, in which case metrics and the KL profile are
/// appended rather than rewritten.
pub fn train(
    net: &mut MatNet<f32>,
    opt: &mut OptimState<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    timer: Timer,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.image_dims() != (net.cfg.input_channels, net.cfg.input_h, net.cfg.input_w) {
        return Err(Error::Data(format!(
            "dataset images {:?} do not match model input {}x{}x{}",
            data.image_dims(),
            net.cfg.input_channels,
            net.cfg.input_h,
            net.cfg.input_w
        )));
    }
    if net.cfg.conditional && matches!(cfg.mask, MaskSpec::None) {
        return Err(Error::Config("conditional training requires a mask spec".into()));
    }
    fs::create_dir_all(out_dir)?;

    let (train_set, val_set) = data.split(cfg.val_fraction);
    let root = Rng::new(cfg.seed, 0);
    let resuming = opt.step_count() > 0;

    let metrics_path = out_dir.join("metrics.csv");
    let val_path = out_dir.join("val.csv");
    let kl_profile_path = out_dir.join("kl_profile.csv");
    let mut metrics;
    let mut val_csv;
    let mut profile;
    if resuming && metrics_path.exists() {
        metrics = BufWriter::new(fs::OpenOptions::new().append(true).open(&metrics_path)?);
        val_csv = BufWriter::new(fs::OpenOptions::new().append(true).open(&val_path)?);
        profile = KlProfile::parse(&kl_profile_path)?;
    } else {
        metrics = BufWriter::new(File::create(&metrics_path)?);
        writeln!(metrics, "update,loss,recon,kl_total,reg,wall_ms")?;
        val_csv = BufWriter::new(File::create(&val_path)?);
        writeln!(val_csv, "update,val_nll,iwae_k")?;
        profile = KlProfile::new(net.layer_labels());
    }

    let mut update: u64 = opt.step_count();
    let mut skipped: u64 = 0;
    let mut final_loss = f64::NAN;
    let mut val_history = Vec::new();
    let mut mixture_warned = false;

    for epoch in 0..cfg.epochs {
        let view = train_set.epoch_view(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        root.split_named("shuffle").split(epoch as u64).shuffle(&mut order);

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size && order.len() >= cfg.batch_size {
                continue; // drop ragged tail batches for shape stability
            }
            update += 1;
            let x = train_set.batch_from_view(&view, chunk);
            let obs = if net.cfg.conditional {
                let mut mask_rng = root.split_named("mask").split(update);
                let mask = make_mask(&cfg.mask, x.dims(), &mut mask_rng)?;
                Observation::masked(x, mask)?
            } else {
                Observation::full(x)
            };

            let mut tape: Tape<f32> = Tape::new().with_checked(cfg.checked);
            let mut noise_rng = root.split_named("noise").split(update);
            let report = net.free_energy(&mut tape, &obs, &mut noise_rng, cfg.mc_samples)?;
            if report.mixture_kl_negative && !mixture_warned {
                eprintln!("note: mixture KL approximation went negative (expected for well-separated posteriors)");
                mixture_warned = true;
            }

            let recon_mean = ops::mean_all(&mut tape, &report.recon_nll)?;
            let mut kl_total = Tensor::scalar(0.0);
            for kl in &report.layer_kls {
                let m = ops::mean_all(&mut tape, kl)?;
                kl_total = ops::add(&mut tape, &kl_total, &m)?;
            }
            let kl_weight = if cfg.kl_warmup_updates > 0 && update <= cfg.kl_warmup_updates as u64 {
                update as f64 / cfg.kl_warmup_updates as f64
            } else {
                1.0
            };
            let weighted_kl = ops::scale(&mut tape, &kl_total, kl_weight)?;
            let mut loss = ops::add(&mut tape, &recon_mean, &weighted_kl)?;

            if let Some(ent) = &report.entropy {
                let w = ops::scale(&mut tape, ent, cfg.entropy_weight)?;
                loss = ops::add(&mut tape, &loss, &w)?;
            }
            let mut reg_value = 0.0;
            if cfg.lambda_q > 0.0 {
                let mut reg_rng = root.split_named("reg").split(update);
                let cond = if net.cfg.conditional { Some(&obs) } else { None };
                let reg = net.inference_regularizer(
                    &mut tape,
                    obs.batch(),
                    &mut reg_rng,
                    cond,
                    cfg.reg_hard_sample,
                )?;
                reg_value = reg.item() * cfg.lambda_q;
                let weighted = ops::scale(&mut tape, &reg, cfg.lambda_q)?;
                loss = ops::add(&mut tape, &loss, &weighted)?;
            }

            let loss_value = loss.item();
            final_loss = loss_value;
            let kls: Vec<f64> = report.layer_kls.iter().map(|kl| kl.mean_value()).collect();

            if loss_value.is_finite() {
                let grads = tape.backward(&loss)?;
                match adam_step(net, &grads, opt) {
                    StepOutcome::Applied { .. } => {}
                    StepOutcome::SkippedNonFinite => {
                        skipped += 1;
                        eprintln!("update {update}: non-finite gradients, step skipped");
                    }
                }
            } else {
                skipped += 1;
                eprintln!("update {update}: non-finite loss, step skipped");
            }

            writeln!(
                metrics,
                "{update},{loss_value},{},{},{reg_value},{}",
                report.recon_nll.mean_value(),
                kls.iter().sum::<f64>(),
                timer.now_ms()
            )?;
            profile.push(update, kls);

            if cfg.eval_every > 0 && update % cfg.eval_every as u64 == 0 && !val_set.is_empty() {
                let nll = validation_nll(net, &val_set, cfg, 1, root.split_named("eval").split(update))?;
                writeln!(val_csv, "{update},{nll},1")?;
                val_history.push((update, nll));
            }
            if cfg.ckpt_every > 0 && update % cfg.ckpt_every as u64 == 0 {
                write_checkpoint(net, opt, out_dir, &update.to_string())?;
            }
        }
    }

    metrics.flush()?;
    val_csv.flush()?;
    profile.export(&kl_profile_path)?;
    let checkpoint_path = write_checkpoint(net, opt, out_dir, "final")?;

    Ok(TrainSummary {
        updates: update,
        skipped,
        final_loss,
        metrics_path,
        kl_profile_path,
        checkpoint_path,
        val_history,
    })
}

/// Mean validation NLL via the importance-weighted bound with k samples.
/// Uses the epoch-0 view of the validation split.
pub fn validation_nll(
    net: &MatNet<f32>,
    val: &Dataset,
    cfg: &TrainConfig,
    k: usize,
    rng: Rng,
) -> Result<f64> {
    let view = val.epoch_view(0);
    let mut total = 0.0;
    let mut count = 0usize;
    let chunk_size = cfg.batch_size.max(16);
    let indices: Vec<usize> = (0..val.len()).collect();
    for chunk in indices.chunks(chunk_size) {
        let x = val.batch_from_view(&view, chunk);
        let obs = if net.cfg.conditional {
            let mut mask_rng = rng.split(count as u64 + 1);
            let mask = make_mask(&cfg.mask, x.dims(), &mut mask_rng)?;
            Observation::masked(x, mask)?
        } else {
            Observation::full(x)
        };
        let mut eval_rng = rng.split(0xe7a1 + count as u64);
        let (_, per) = net.eval_nll(&obs, k, &mut eval_rng)?;
        total += per.iter().sum::<f64>();
        count += per.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Closed-form independent-Bernoulli baseline: per-pixel MLE probabilities
/// from a training set (add-one smoothed), evaluated as mean NLL on a
/// held-out set. With a mask batch, only unknown pixels contribute.
pub fn bernoulli_marginal_nll(
    train_images: &Tensor<f32>,
    eval_images: &Tensor<f32>,
    eval_mask: Option<&Tensor<f32>>,
) -> f64 {
    let per = train_images.shape().per_example();
    let n_train = train_images.shape().batch();
    let mut p_hat = vec![0.0f64; per];
    for bi in 0..n_train {
        for (j, p) in p_hat.iter_mut().enumerate() {
            *p += train_images.data()[bi * per + j] as f64;
        }
    }
    for p in p_hat.iter_mut() {
        *p = (*p + 1.0) / (n_train as f64 + 2.0);
    }
    let n_eval = eval_images.shape().batch();
    let mut total = 0.0;
    for bi in 0..n_eval {
        for j in 0..per {
            if let Some(m) = eval_mask {
                if m.data()[bi * per + j] != 0.0 {
                    continue; // known pixel: not part of the prediction target
                }
            }
            let x = eval_images.data()[bi * per + j] as f64;
            let p = p_hat[j];
            total -= x * p.ln() + (1.0 - x) * (1.0 - p).ln();
        }
    }
    total / n_eval as f64
}

/// Structured-prediction evaluation: mean conditional NLL over the unknown
/// quadrants when `q_known` random quadrants are visible.
pub fn quadrant_eval(
    net: &MatNet<f32>,
    images: &Tensor<f32>,
    q_known: usize,
    iwae_k: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if !(1..=3).contains(&q_known) {
        return Err(Error::invalid("quadrant_eval", format!("q_known must be 1..=3, got {q_known}")));
    }
    if !net.cfg.conditional {
        return Err(Error::invalid("quadrant_eval", "needs a conditional model"));
    }
    let n = images.shape().batch();
    let dims = images.dims().to_vec();
    let per = images.shape().per_example();
    let mut total = 0.0;
    let mut count = 0usize;
    let chunk = 64usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in &idx {
            data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
        }
        let mut bdims = dims.clone();
        bdims[0] = idx.len();
        let x = Tensor::from_vec(data, &bdims);
        let mut mask_rng = rng.split(start as u64 + 1);
        let mask = make_mask(&MaskSpec::Quadrants { known: q_known }, &bdims, &mut mask_rng)?;
        let obs = Observation::masked(x, mask)?;
        let mut eval_rng = rng.split(q_known as u64 ^ ((start as u64) << 8));
        let (_, per_ex) = net.eval_nll(&obs, iwae_k, &mut eval_rng)?;
        total += per_ex.iter().sum::<f64>();
        count += per_ex.len();
        start = end;
    }
    Ok(total / count as f64)
}
