//! Joint recognition and adversarial training.
//!
//! One backward pass per batch: the recognition loss on labeled items plus
//! the domain loss on every item, with the discriminator branch entered
//! through gradient reversal. The discriminator therefore descends the
//! domain loss while the encoder ascends it.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{c, Float, Graph, NodeId};
use crate::datakit::{collate, plan_epoch, DomainBatch, ItemRef};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_images, MetricsReport, Normalization};
use crate::mix_seed;
use crate::model::Network;
use crate::nn::{apply_bn_updates, Forward, ParamStore, BN_MOMENTUM};
use crate::synthgen::{augment, AugmentConfig, Domain, LabelAudit, WordImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Labeled synthetic data only.
    SourceOnly,
    /// Labeled synthetic plus unlabeled real data.
    UnsupAdapt,
    /// Labeled real data only.
    SupAdapt,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(TrainMode::SourceOnly),
            "unsup_adapt" => Ok(TrainMode::UnsupAdapt),
            "sup_adapt" => Ok(TrainMode::SupAdapt),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaKind {
    Constant,
    Linear,
    Exponential,
}

impl std::str::FromStr for LambdaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LambdaKind::Constant),
            "linear" => Ok(LambdaKind::Linear),
            "exponential" => Ok(LambdaKind::Exponential),
            _ => Err(Error::InvalidArgument(format!("unknown lambda schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSchedule {
    pub kind: LambdaKind,
    /// Epoch horizon `E` over which the ramps reach their final value.
    pub horizon: f64,
    /// Final (and, for the constant schedule, only) value.
    #[serde(default = "one")]
    pub max: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            kind: LambdaKind::Constant,
            horizon: 10.0,
            max: 1.0,
        }
    }
}

/// Gradient-reversal strength at (possibly fractional) `epoch`; clamped to the horizon.
pub fn lambda_value(s: &LambdaSchedule, epoch: f64) -> f64 {
    let p = if s.horizon > 0.0 {
        (epoch / s.horizon).clamp(0.0, 1.0)
    } else {
        1.0
    };
    s.max
        * match s.kind {
            LambdaKind::Constant => 1.0,
            LambdaKind::Linear => p,
            LambdaKind::Exponential => 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0,
        }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    pub lambda: LambdaSchedule,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Draw fresh discriminator weights when adaptation starts.
    pub reset_discriminator: bool,
    /// Augmentation applied to synthetic items as they are batched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online_augment: Option<AugmentConfig>,
    pub eval_batch_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::SourceOnly,
            learning_rate: 2e-4,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            lambda: LambdaSchedule::default(),
            epochs: 10,
            max_steps: None,
            seed: 0,
            reset_discriminator: true,
            online_augment: None,
            eval_batch_size: 64,
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.lambda.horizon < 0.0 {
            return Err(Error::Config("lambda horizon must be non-negative".into()));
        }
        if !(self.lambda.max >= 0.0 && self.lambda.max.is_finite()) {
            return Err(Error::Config("lambda max must be non-negative".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("either epochs or max_steps must be positive".into()));
        }
        if let Some(aug) = &self.online_augment {
            aug.validate()?;
        }
        Ok(())
    }
}

/// Per-character cross-entropy averaged over the rows of `logits`
/// (`[len, C]`), one row per target token.
pub fn recognition_loss(logits: &Array2<f64>, target: &[usize]) -> Result<f64> {
    if logits.nrows() != target.len() {
        return Err(Error::LengthMismatch {
            left: logits.nrows(),
            right: target.len(),
        });
    }
    let g = Graph::<f64>::new();
    let l = g.constant(logits.clone().into_dyn());
    Ok(g.scalar(g.cross_entropy(l, target, &vec![1.0; target.len()])))
}

/// Mean binary cross-entropy with source = 1, target = 0.
pub fn domain_loss(logits: &[f64], labels: &[Domain]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: labels.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("no items".into()));
    }
    let g = Graph::<f64>::new();
    let l = g.constant(ndarray::arr1(logits).into_dyn());
    let y: Vec<f64> = labels.iter().map(|d| d.label()).collect();
    Ok(g.scalar(g.bce_with_logits(l, &y)))
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub recognition: Option<NodeId>,
    pub domain: Option<NodeId>,
}

/// Builds both losses for `batch`. Only items flagged as labeled reach the
/// decoder; with `lambda` set, every item reaches the discriminator through
/// gradient reversal.
pub fn forward_losses<T: Float>(
    net: &Network<T>,
    f: &Forward<'_, T>,
    batch: &DomainBatch,
    lambda: Option<f64>,
) -> Result<LossNodes> {
    let g = f.g;
    let ink: ArrayD<T> = batch.ink.mapv(|v| c::<T>(v as f64)).into_dyn();
    let enc = net.rec.encoder.forward(f, &ink, &batch.widths)?;
    let labeled: Vec<usize> = (0..batch.len()).filter(|&i| batch.is_labeled(i)).collect();
    let recognition = match &batch.targets {
        Some(t) if !labeled.is_empty() => {
            let max_len = labeled.iter().map(|&i| t.lengths[i]).max().unwrap();
            let rows = t.ids.select(Axis(0), &labeled);
            let targets = rows.slice(ndarray::s![.., ..max_len]).to_owned();
            let h = g.gather_rows(enc.h, &labeled);
            let lengths: Vec<usize> = labeled.iter().map(|&i| enc.lengths[i]).collect();
            let logits = net.rec.decoder.forward_teacher_forced(f, h, &lengths, &targets, net.charset.end());
            let mut weights = Vec::with_capacity(targets.len());
            for &i in &labeled {
                weights.extend((0..max_len).map(|k| if k < t.lengths[i] { T::one() } else { T::zero() }));
            }
            let flat: Vec<usize> = targets.iter().map(|&id| if id == net.charset.pad() { 0 } else { id }).collect();
            Some(g.cross_entropy(logits, &flat, &weights))
        }
        _ => None,
    };
    let domain = match lambda {
        Some(lambda) => {
            let logits = net.disc.forward(f, &enc, lambda)?;
            let labels: Vec<T> = batch.domains.iter().map(|d| c(d.label())).collect();
            Some(g.bce_with_logits(logits, &labels))
        }
        None => None,
    };
    Ok(LossNodes { recognition, domain })
}

/// Adam with per-tensor step counters, so tensors that join training later
/// (the discriminator) start their bias correction from one.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub m: Vec<Option<ArrayD<f32>>>,
    pub v: Vec<Option<ArrayD<f32>>>,
    pub t: Vec<u64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
        }
    }

    /// Carries moments across to another store layout by parameter name.
    /// Tensors without a counterpart start fresh.
    pub fn remap<T: Float, U: Float>(&self, from: &ParamStore<T>, to: &ParamStore<U>) -> Adam {
        let mut out = Adam::new(to.len());
        for (i, e) in to.entries().iter().enumerate() {
            if let Some(j) = from.find(&e.name) {
                let j = j.0;
                if self.m[j].as_ref().is_some_and(|m| m.shape() == e.value.shape()) {
                    out.m[i] = self.m[j].clone();
                    out.v[i] = self.v[j].clone();
                    out.t[i] = self.t[j];
                }
            }
        }
        out
    }

    /// One update of the tensors listed in `grads`.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[(usize, ArrayD<f32>)], cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let (lr, eps) = (cfg.learning_rate as f32, cfg.adam_eps as f32);
        for (idx, grad) in grads {
            let idx = *idx;
            let m = self.m[idx].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v[idx].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            self.t[idx] += 1;
            let t = self.t[idx] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (m, v) = (self.m[idx].as_ref().unwrap(), self.v[idx].as_ref().unwrap());
            let w = store.get_mut(crate::nn::ParamId(idx));
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Losses of one step. `total` is the bookkeeping value `L_r - lambda L_d`;
/// the optimizer follows `L_r + L_d` with reversal inside the graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_r: f64,
    pub l_d: Option<f64>,
    pub lambda: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Position in training. Together with the parameters and optimizer moments
/// this determines every later step exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: u64,
    /// Index of the next batch within the current epoch.
    pub batch_in_epoch: usize,
    pub step: u64,
    pub best_val_cer: Option<f64>,
    pub clip_events: u64,
}

/// Data pools for one run. Labels of `target` items are never read unless
/// the mode is supervised adaptation.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a [WordImage],
    pub target: &'a [WordImage],
    pub val: &'a [WordImage],
}

/// One validation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: u64,
    pub step: u64,
    pub cer: f64,
    pub wer: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_d")]
    pub l_d: Option<f64>,
    pub lambda: f64,
}

/// Append-only JSON-lines log whose first line echoes the run config.
pub struct MetricsLog {
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>, config_echo: &str) -> Result<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{}", serde_json::json!({ "config": config_echo }))?;
        out.flush()?;
        Ok(Self { out })
    }

    /// Opens an existing log for appending (as when resuming); creates it
    /// with a header if missing.
    pub fn reopen(path: impl AsRef<Path>, config_echo: &str) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Self::create(path, config_echo);
        }
        let file = fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn append(&mut self, rec: &ValRecord) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(rec)?)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Summary of a [`Trainer::train`] call.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<LossBundle>,
    pub validations: Vec<ValRecord>,
    /// Parameters with the lowest validation CER seen so far.
    pub best: Option<ParamStore<f32>>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network<f32>,
    pub opt: Adam,
    pub state: TrainState,
    plan: Option<(u64, Vec<Vec<ItemRef>>)>,
    epoch_losses: (f64, f64, usize, usize),
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: Network<f32>) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(net.store.len());
        let mut t = Self {
            cfg,
            net,
            opt,
            state: TrainState::default(),
            plan: None,
            epoch_losses: (0.0, 0.0, 0, 0),
        };
        if t.cfg.mode == TrainMode::UnsupAdapt && t.cfg.reset_discriminator {
            t.net.reset_discriminator(mix_seed(t.cfg.seed, 0xD15C));
        }
        Ok(t)
    }

    /// Continues from a pretrained model and its optimizer state, as when
    /// adaptation follows synthetic pretraining.
    pub fn continue_from(cfg: TrainConfig, net: Network<f32>, opt: Adam) -> Result<Self> {
        let mut t = Self::new(cfg, net)?;
        if opt.m.len() == t.net.store.len() {
            t.opt = opt;
        }
        Ok(t)
    }

    /// Restores a trainer exactly as it was when checkpointed.
    pub fn resume(cfg: TrainConfig, net: Network<f32>, opt: Adam, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            net,
            opt,
            state,
            plan: None,
            epoch_losses: (0.0, 0.0, 0, 0),
        })
    }

    fn uses_discriminator(&self) -> bool {
        self.cfg.mode == TrainMode::UnsupAdapt
    }

    /// Pool the epoch plan indexes as "source": target for supervised
    /// adaptation, synthetic otherwise.
    fn pools<'a>(&self, data: &TrainData<'a>) -> (&'a [WordImage], &'a [WordImage]) {
        match self.cfg.mode {
            TrainMode::SourceOnly => (data.source, &[]),
            TrainMode::UnsupAdapt => (data.source, data.target),
            TrainMode::SupAdapt => (data.target, &[]),
        }
    }

    fn epoch_plan(&mut self, data: &TrainData<'_>) -> Result<&Vec<Vec<ItemRef>>> {
        let epoch = self.state.epoch;
        if self.plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let (a, b) = self.pools(data);
            if self.uses_discriminator() && b.is_empty() {
                return Err(Error::ExhaustedStream("target"));
            }
            let plan = plan_epoch(a.len(), b.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
            self.plan = Some((epoch, plan));
        }
        Ok(&self.plan.as_ref().unwrap().1)
    }

    /// Current strength of the reversal, using fractional epochs.
    pub fn current_lambda(&self, batches_per_epoch: usize) -> f64 {
        let frac = self.state.batch_in_epoch as f64 / batches_per_epoch.max(1) as f64;
        lambda_value(&self.cfg.lambda, self.state.epoch as f64 + frac)
    }

    /// Collates the next batch of the plan.
    pub fn next_batch(&mut self, data: &TrainData<'_>, audit: &LabelAudit) -> Result<(DomainBatch, f64)> {
        let (a, b) = self.pools(data);
        let mode = self.cfg.mode;
        let at = self.state.batch_in_epoch;
        let plan = self.epoch_plan(data)?;
        let n_batches = plan.len();
        let items = plan[at].clone();
        let lambda = self.current_lambda(n_batches);
        let step_seed = mix_seed(self.cfg.seed, self.state.step);
        let augmented: Vec<WordImage>;
        let mut refs: Vec<&WordImage> = items
            .iter()
            .map(|it| match it.domain {
                Domain::Source => &a[it.index],
                Domain::Target => &b[it.index],
            })
            .collect();
        if let Some(aug) = &self.cfg.online_augment {
            augmented = refs
                .iter()
                .enumerate()
                .map(|(k, img)| {
                    if img.domain == Domain::Source {
                        augment(img, aug, mix_seed(step_seed, k as u64))
                    } else {
                        (*img).clone()
                    }
                })
                .collect();
            refs = augmented.iter().collect();
        }
        let labeled = move |d: Domain| match mode {
            TrainMode::SupAdapt => true,
            _ => d == Domain::Source,
        };
        Ok((collate(&refs, &self.net.charset, audit, labeled)?, lambda))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &DomainBatch, lambda: f64) -> Result<LossBundle> {
        let step = self.state.step;
        let g = Graph::<f32>::new();
        let (losses, bn) = {
            let f = Forward::new(&g, &self.net.store, true, true, mix_seed(self.cfg.seed ^ 0xD0, step));
            let lambda_opt = self.uses_discriminator().then_some(lambda);
            let nodes = forward_losses(&self.net, &f, batch, lambda_opt)?;
            (nodes, f.take_bn_updates())
        };
        let l_r = losses.recognition.map_or(0.0, |n| g.scalar(n) as f64);
        let l_d = losses.domain.map(|n| g.scalar(n) as f64);
        let root = match (losses.recognition, losses.domain) {
            (Some(r), Some(d)) => g.add(r, d),
            (Some(r), None) => r,
            (None, Some(d)) => d,
            (None, None) => return Err(Error::InvalidArgument("batch yields no loss".into())),
        };
        if !l_r.is_finite() || l_d.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NaNLoss {
                step,
                detail: format!("L_r={l_r} L_d={l_d:?} lambda={lambda} widths={:?}", batch.widths),
            });
        }
        let grads = g.backward(root);
        let mut list: Vec<(usize, ArrayD<f32>)> = grads.params().map(|(i, gr)| (i, gr.clone())).collect();
        drop(grads);
        let norm = list
            .iter()
            .map(|(_, gr)| gr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NaNLoss {
                step,
                detail: format!("non-finite gradient norm; L_r={l_r} L_d={l_d:?}"),
            });
        }
        let clipped = norm > self.cfg.clip_norm;
        if clipped {
            let s = (self.cfg.clip_norm / norm) as f32;
            for (_, gr) in &mut list {
                gr.mapv_inplace(|v| v * s);
            }
            self.state.clip_events += 1;
        }
        self.opt.update(&mut self.net.store, &list, &self.cfg);
        apply_bn_updates(&mut self.net.store, bn, BN_MOMENTUM);
        self.state.step += 1;
        Ok(LossBundle {
            l_r,
            l_d,
            lambda,
            total: l_r - lambda * l_d.unwrap_or(0.0),
            grad_norm: norm,
            clipped,
        })
    }

    fn done(&self) -> bool {
        let by_steps = self.cfg.max_steps.is_some_and(|m| self.state.step >= m);
        let by_epochs = self.cfg.epochs > 0 && self.state.epoch >= self.cfg.epochs as u64;
        by_steps || by_epochs
    }

    fn validate(&mut self, data: &TrainData<'_>, report: &mut TrainReport, log: &mut Option<&mut MetricsLog>) -> Result<()> {
        let (sr, sd, nr, nd) = std::mem::take(&mut self.epoch_losses);
        if data.val.is_empty() {
            return Ok(());
        }
        let m: MetricsReport = evaluate_images(&self.net, data.val, self.cfg.normalization, self.cfg.eval_batch_size)?;
        let rec = ValRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            cer: m.cer,
            wer: m.wer,
            l_r: sr / nr.max(1) as f64,
            l_d: (nd > 0).then(|| sd / nd as f64),
            lambda: report.losses.last().map_or(0.0, |l| l.lambda),
        };
        log::info!("epoch {} step {}: CER {:.2} WER {:.2}", rec.epoch, rec.step, rec.cer, rec.wer);
        if self.state.best_val_cer.is_none_or(|b| m.cer < b) {
            self.state.best_val_cer = Some(m.cer);
            report.best = Some(self.net.store.clone());
        }
        if let Some(log) = log {
            log.append(&rec)?;
        }
        report.validations.push(rec);
        Ok(())
    }

    /// Runs until the epoch budget or step cap is reached, validating at
    /// the end of every epoch (and once more if stopped mid-epoch).
    pub fn train(&mut self, data: &TrainData<'_>, audit: &LabelAudit, mut log: Option<&mut MetricsLog>) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while !self.done() {
            let (batch, lambda) = self.next_batch(data, audit)?;
            let loss = self.train_step(&batch, lambda)?;
            self.epoch_losses.0 += loss.l_r;
            self.epoch_losses.2 += 1;
            if let Some(d) = loss.l_d {
                self.epoch_losses.1 += d;
                self.epoch_losses.3 += 1;
            }
            report.losses.push(loss);
            self.state.batch_in_epoch += 1;
            let n = self.plan.as_ref().map_or(0, |(_, p)| p.len());
            if self.state.batch_in_epoch >= n {
                self.validate(data, &mut report, &mut log)?;
                self.state.epoch += 1;
                self.state.batch_in_epoch = 0;
            }
        }
        if self.state.batch_in_epoch > 0 {
            self.validate(data, &mut report, &mut log)?;
        }
        Ok(report)
    }

    /// Runs exactly `n` more steps without validation; returns their losses.
    pub fn run_steps(&mut self, data: &TrainData<'_>, audit: &LabelAudit, n: u64) -> Result<Vec<LossBundle>> {
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let (batch, lambda) = self.next_batch(data, audit)?;
            out.push(self.train_step(&batch, lambda)?);
            self.state.batch_in_epoch += 1;
            let len = self.plan.as_ref().map_or(0, |(_, p)| p.len());
            if self.state.batch_in_epoch >= len {
                self.state.epoch += 1;
                self.state.batch_in_epoch = 0;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
