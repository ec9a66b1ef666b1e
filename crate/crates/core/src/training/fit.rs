//! The epoch loop: Adam steps, per-epoch validation, improvement-only
//! checkpoints and a metric event log.

use std::io::Write;
use std::path::{Path, PathBuf};

use footprint_grad::{Adam, AdamConfig, Graph};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, FORMAT};
use super::evaluate::{argmax_mask, evaluate, make_batch, two_channel, EvalOptions, Evaluation};
use super::events::{EventLog, Split};
use super::lr_find::LrProbe;
use super::schedule::OneCycle;
use crate::dataset::patch::{Normalization, Patch};
use crate::dataset::{write_mask, write_rgb};
use crate::losses::{attach_loss, ClassWeights, LossConfig};
use crate::metrics::{confusion_nd, scores, ConfusionCounts, MetricReport};
use crate::models::Model;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// Fixed learning rate `TrainConfig::lr`; Adam adapts per parameter.
    #[default]
    Constant,
    OneCycle(OneCycle),
}

/// Validation metric that decides when a checkpoint is written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    Accuracy,
    Dice,
    Iou,
}

impl Monitor {
    pub fn name(&self) -> &'static str {
        match self {
            Monitor::Accuracy => "accuracy",
            Monitor::Dice => "dice_score",
            Monitor::Iou => "iou",
        }
    }

    pub fn read(&self, r: &MetricReport) -> f64 {
        match self {
            Monitor::Accuracy => r.accuracy,
            Monitor::Dice => r.dice_score,
            Monitor::Iou => r.iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub loss: LossConfig,
    pub monitor: Monitor,
    pub record_wall_time: bool,
    /// Excludes `encoder.*` parameters from optimisation.
    pub freeze_encoder: bool,
    /// Ends training once a training batch loss falls below this value.
    pub stop_below_loss: Option<f64>,
    /// Caps the number of optimiser steps.
    pub max_steps: Option<usize>,
    pub eval_batch_size: usize,
    /// Sample triples written per validation pass.
    pub samples: usize,
    pub pr_thresholds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 20,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            seed: 0,
            loss: LossConfig::default(),
            monitor: Monitor::Accuracy,
            record_wall_time: true,
            freeze_encoder: false,
            stop_below_loss: None,
            max_steps: None,
            eval_batch_size: 8,
            samples: 4,
            pr_thresholds: 101,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, or an empty list.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs < 1 {
            p.push("train.epochs must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            p.push("train.batch_size must be >= 1".to_string());
        }
        if self.eval_batch_size < 1 {
            p.push("train.eval_batch_size must be >= 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("train.lr must be > 0, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            p.push(format!("train.betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            p.push(format!("train.eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Schedule::OneCycle(oc) = &self.schedule {
            if let Err(e) = oc.validate() {
                p.push(format!("train.schedule: {e}"));
            }
        }
        if let Err(e) = self.loss.validate() {
            p.push(format!("train.loss: {e}"));
        }
        if self.max_steps == Some(0) {
            p.push("train.max_steps must be >= 1 when set".to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// `(lr, beta1)` for global step `step` out of `total`.
    pub fn schedule_at(&self, step: usize, total: usize) -> Result<(f64, f64)> {
        match &self.schedule {
            Schedule::Constant => Ok((self.lr, self.betas.0)),
            Schedule::OneCycle(oc) => oc.at(step, total),
        }
    }
}

/// Random stream for epoch `epoch`: shuffling first, then dropout masks.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Training order for one epoch.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train: MetricReport,
    pub val_loss: f64,
    pub val: MetricReport,
    pub improved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub monitor: String,
    pub checkpoints: Vec<PathBuf>,
    /// Most recent improvement checkpoint.
    pub best_checkpoint: Option<PathBuf>,
    pub last_batch_loss: f64,
    /// Stopped on `stop_below_loss` or `max_steps`.
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions<'a> {
    /// Directory for the event log, metric tables, samples and checkpoints.
    pub run_dir: Option<&'a Path>,
    pub resume: Option<&'a Checkpoint>,
    pub class_weights: Option<ClassWeights>,
    /// Input normalisation, used to render sample images.
    pub normalization: Normalization,
    /// Echoed into checkpoints.
    pub config_echo: serde_json::Value,
}

struct RunFiles {
    dir: PathBuf,
    events: EventLog,
    metrics: std::fs::File,
    pr: std::fs::File,
}

impl RunFiles {
    fn open(dir: &Path, record_wall_time: bool, resumed: bool) -> Result<Self> {
        std::fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
        let events = EventLog::open(&dir.join("events.csv"), record_wall_time)?;
        let table = |name: &str, header: &str| -> Result<std::fs::File> {
            let path = dir.join(name);
            let fresh = !resumed || !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(resumed)
                .write(true)
                .truncate(!resumed)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(f)
        };
        let metrics = table("metrics.csv", &format!("epoch,split,loss,{}", MetricReport::CSV_HEADER))?;
        let pr = table("pr.csv", "epoch,threshold,precision,recall")?;
        Ok(Self { dir: dir.to_path_buf(), events, metrics, pr })
    }

    fn table_row(&mut self, epoch: usize, split: Split, loss: f64, r: &MetricReport) -> Result<()> {
        writeln!(self.metrics, "{epoch},{},{loss},{}", split.as_str(), r.csv_row())
            .map_err(|e| Error::io(self.dir.join("metrics.csv"), e))?;
        if split == Split::Val {
            for p in &r.pr_points {
                writeln!(self.pr, "{epoch},{},{},{}", p.threshold, p.precision, p.recall)
                    .map_err(|e| Error::io(self.dir.join("pr.csv"), e))?;
            }
        }
        Ok(())
    }

    fn samples(&self, epoch: usize, ev: &Evaluation, norm: &Normalization) -> Result<()> {
        for (i, s) in ev.samples.iter().enumerate() {
            let stem = self.dir.join("samples").join(format!("epoch{epoch:03}_{i}"));
            write_rgb(&stem.with_extension("input.png"), &norm.to_rgb(s.image.view()))?;
            write_mask(&stem.with_extension("target.png"), &s.target)?;
            write_mask(&stem.with_extension("pred.png"), &s.prediction)?;
        }
        Ok(())
    }
}

/// Result of one optimiser step.
pub struct StepResult {
    pub loss: f64,
    pub counts: ConfusionCounts,
}

/// Forward, loss, backward and Adam update on one batch; batch-norm running
/// statistics are updated after the parameter step.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Patch],
    loss: &LossConfig,
    class_weights: Option<ClassWeights>,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let (x, target) = make_batch(batch)?;
    let mut g = Graph::new(&model.store, true);
    let xn = g.input(x);
    let probs = model.forward(&mut g, xn, rng)?;
    let (root, value) = attach_loss(&mut g, probs, loss, target.view(), class_weights)?;
    if !value.is_finite() {
        return Ok(StepResult { loss: value, counts: ConfusionCounts::default() });
    }
    let p = two_channel(g.value(probs))?;
    let (n, _, h, w) = p.dims4()?;
    let p = Array4::from_shape_vec((n, 2, h, w), p.into_data()).expect("dims checked");
    let counts = confusion_nd(argmax_mask(&p).view().into_dyn(), target.view().into_dyn())?;
    let grads = g.backward(root)?;
    let updates = g.into_buffer_updates();
    adam.step(&mut model.store, &grads)?;
    model.store.apply_updates(updates);
    Ok(StepResult { loss: value, counts })
}

/// Trains `model` in place.
pub fn fit(model: &mut Model, train: &[Patch], val: &[Patch], cfg: &TrainConfig, opts: FitOptions<'_>) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let mut adam = Adam::new(cfg.adam_config());
    let mut start_epoch = 0;
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = None;
    if let Some(ck) = opts.resume {
        if ck.meta.metric_name != cfg.monitor.name() {
            return Err(Error::Checkpoint(format!(
                "checkpoint monitors {} but the run monitors {}",
                ck.meta.metric_name,
                cfg.monitor.name()
            )));
        }
        *model = ck.restore_model()?;
        adam = ck.restore_adam(model)?;
        start_epoch = ck.meta.epoch;
        best = ck.meta.metric_value;
        best_epoch = Some(ck.meta.epoch);
    }
    if cfg.freeze_encoder {
        model.store.set_frozen("encoder.", true);
    }
    let mut files = match opts.run_dir {
        Some(dir) => Some(RunFiles::open(dir, cfg.record_wall_time, opts.resume.is_some())?),
        None => None,
    };

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total = cfg.epochs * per_epoch;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let mut step = start_epoch * per_epoch;
    let eval_opts = EvalOptions {
        batch_size: cfg.eval_batch_size,
        loss: Some(&cfg.loss),
        class_weights: opts.class_weights,
        samples: if files.is_some() { cfg.samples } else { 0 },
        pr_thresholds: cfg.pr_thresholds,
    };
    let mut outcome = FitOutcome {
        history: Vec::new(),
        steps: 0,
        best_epoch,
        best_metric: best_epoch.map(|_| best),
        monitor: cfg.monitor.name().to_string(),
        checkpoints: Vec::new(),
        best_checkpoint: None,
        last_batch_loss: f64::NAN,
        stopped_early: false,
    };

    for epoch in start_epoch..cfg.epochs {
        if step >= total {
            break;
        }
        let mut rng = epoch_rng(cfg.seed, epoch);
        let order = epoch_order(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut counts = ConfusionCounts::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total {
                outcome.stopped_early = true;
                break;
            }
            let (lr, beta1) = cfg.schedule_at(step, total)?;
            adam.set_lr(lr);
            adam.set_beta1(beta1);
            let batch: Vec<&Patch> = chunk.iter().map(|&i| &train[i]).collect();
            let r = train_step(model, &mut adam, &batch, &cfg.loss, opts.class_weights, &mut rng)?;
            if !r.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b, lr });
            }
            step += 1;
            loss_sum += r.loss * chunk.len() as f64;
            seen += chunk.len();
            counts += r.counts;
            outcome.last_batch_loss = r.loss;
            if let Some(f) = files.as_mut() {
                f.events.log(step as u64, Split::Train, "batch_loss", r.loss)?;
                f.events.log(step as u64, Split::Train, "lr", lr)?;
            }
            if cfg.stop_below_loss.is_some_and(|t| r.loss < t) {
                outcome.stopped_early = true;
                break;
            }
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let train_report = scores(counts);
        let ev = evaluate(model, val, &eval_opts)?;
        let val_loss = ev.mean_loss.unwrap_or(f64::NAN);
        let metric = cfg.monitor.read(&ev.report);
        let improved = metric > best;
        let k = epoch + 1;
        if let Some(f) = files.as_mut() {
            for (split, loss, r) in [(Split::Train, train_loss, &train_report), (Split::Val, val_loss, &ev.report)] {
                f.events.log(step as u64, split, "loss", loss)?;
                f.events.log(step as u64, split, "accuracy", r.accuracy)?;
                f.events.log(step as u64, split, "iou", r.iou)?;
                f.events.log(step as u64, split, "f1", r.f1)?;
                f.table_row(k, split, loss, r)?;
            }
            f.events.flush()?;
            f.samples(k, &ev, &opts.normalization)?;
        }
        if improved {
            best = metric;
            outcome.best_epoch = Some(k);
            outcome.best_metric = Some(metric);
            if let Some(dir) = opts.run_dir {
                let path = dir.join(format!("ckpt-epoch{k}.safetensors"));
                let meta = CheckpointMeta {
                    format: FORMAT.into(),
                    epoch: k,
                    metric_name: cfg.monitor.name().into(),
                    metric_value: metric,
                    adam_step: 0,
                    adam: adam.config.into(),
                    model_config: model.config.clone(),
                    config: opts.config_echo.clone(),
                    seed: cfg.seed,
                };
                save_checkpoint(&path, model, &adam, &meta)?;
                outcome.checkpoints.push(path.clone());
                outcome.best_checkpoint = Some(path);
            }
        }
        log::info!(
            "epoch {k}: train loss {train_loss:.4}, val loss {val_loss:.4}, val {} {metric:.4}{}",
            cfg.monitor.name(),
            if improved { " (improved)" } else { "" }
        );
        outcome.history.push(EpochRecord {
            epoch: k,
            steps: step,
            train_loss,
            train: train_report,
            val_loss,
            val: ev.report,
            improved,
        });
        if outcome.stopped_early {
            break;
        }
    }
    outcome.steps = step;
    if let Some(f) = files.as_mut() {
        f.events.flush()?;
    }
    Ok(outcome)
}

/// Training steps on a throwaway copy of a model, cycling over batches; the
/// learning-rate finder drives it.
pub struct ModelProbe<'a> {
    model: Model,
    adam: Adam,
    data: &'a [Patch],
    batch_size: usize,
    loss: LossConfig,
    class_weights: Option<ClassWeights>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    seed: u64,
}

impl<'a> ModelProbe<'a> {
    pub fn new(model: &Model, data: &'a [Patch], cfg: &TrainConfig, class_weights: Option<ClassWeights>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dataset("learning-rate finder needs data".into()));
        }
        let mut rng = epoch_rng(cfg.seed, 0);
        let order = epoch_order(data.len(), &mut rng);
        Ok(Self {
            model: model.clone(),
            adam: Adam::new(cfg.adam_config()),
            data,
            batch_size: cfg.batch_size.max(1),
            loss: cfg.loss,
            class_weights,
            rng,
            order,
            cursor: 0,
            epoch: 0,
            seed: cfg.seed,
        })
    }
}

impl LrProbe for ModelProbe<'_> {
    fn step(&mut self, lr: f64) -> Result<f64> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.rng = epoch_rng(self.seed, self.epoch);
            self.order = epoch_order(self.data.len(), &mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch: Vec<&Patch> = self.order[self.cursor..end].iter().map(|&i| &self.data[i]).collect();
        self.cursor = end;
        self.adam.set_lr(lr);
        let r = train_step(&mut self.model, &mut self.adam, &batch, &self.loss, self.class_weights, &mut self.rng)?;
        Ok(r.loss)
    }
}
