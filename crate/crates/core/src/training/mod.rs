//! Supervised training: SGD with momentum under a linear-warmup cosine
//! schedule, guarded against non-finite losses.
//!
//! The guard keeps the model and optimizer state from the end of the last
//! clean epoch. When a loss, a gradient or an updated weight is non-finite it
//! restores that state, multiplies the learning-rate scale by
//! `backoff_factor` and reruns the epoch with the same batch order. More than
//! `max_backoffs` consecutive failures of one epoch abort with
//! [`Error::Divergence`]. The reduced scale persists for the rest of the run.

mod checkpoint;
mod config;
mod data;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{network_from_kv, network_to_kv, train_from_kv, KvFile, RunConfig, NETWORK_KEYS, TRAIN_KEYS};
pub use data::{
    flip_horizontal, load_dataset, separable_two_class, texture_four_class, Dataset, IMAGES_FILE, LABELS_FILE,
};

use crate::blocks::{ActivationPlacement, Model};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Learning-rate multiplier applied on every guard trip, in `(0, 1)`.
    pub backoff_factor: f64,
    /// Consecutive guard trips tolerated within one epoch.
    pub max_backoffs: usize,
    /// Overrides the network's activation placement when set from a run file.
    pub clip_activation_placement: Option<ActivationPlacement>,
    /// Seeded random horizontal flips of training batches.
    pub augment_flip: bool,
}

impl Default for TrainConfig {
    /// Desk scale: 20 epochs of batch 64, 5 warmup epochs to a peak of 0.3.
    fn default() -> Self {
        TrainConfig {
            peak_lr: 0.3,
            warmup_epochs: 5,
            total_epochs: 20,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-5,
            seed: 0,
            backoff_factor: 0.5,
            max_backoffs: 3,
            clip_activation_placement: None,
            augment_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.backoff_factor > 0.0 && self.backoff_factor < 1.0) {
            return bad(format!("backoff_factor must lie in (0, 1), got {}", self.backoff_factor));
        }
        Ok(())
    }
}

/// Learning rate at a fractional epoch: linear from 0 to the peak over the
/// warmup, then `peak * (1 + cos(pi * progress)) / 2` down to 0 at the end.
pub fn lr_at(epoch_fraction: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs as f64;
    if !(0.0..=total).contains(&epoch_fraction) {
        return Err(Error::invalid("lr_at", format!("epoch {epoch_fraction} outside [0, {total}]")));
    }
    let warm = cfg.warmup_epochs as f64;
    if epoch_fraction < warm {
        return Ok(cfg.peak_lr * epoch_fraction / warm);
    }
    let progress = (epoch_fraction - warm) / (total - warm);
    Ok(cfg.peak_lr * (1.0 + (PI * progress).cos()) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; nothing was changed.
    NonFinite,
}

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v = momentum * v + g + weight_decay * w`, `w -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    /// Updates `params` in place. Velocity buffers are created lazily and
    /// keyed by position.
    pub fn step_tensors(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<StepOutcome> {
        if params.len() != grads.len() {
            return Err(Error::invalid("sgd_step", format!("{} params but {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Ok(StepOutcome::NonFinite);
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// One optimizer step on every trainable tensor of `model`, with `grads` in
/// [`Model::params`] order.
pub fn sgd_step(model: &mut Model, sgd: &mut Sgd, grads: &[Tensor], lr: f64) -> Result<StepOutcome> {
    let mut params: Vec<&mut Tensor> = model.params_mut().into_iter().map(|(_, t)| t).collect();
    sgd.step_tensors(&mut params, grads, lr)
}

/// One row of the metrics log. Epochs count from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the start of the epoch, backoffs included.
    pub lr: f64,
    /// Mean train-mode loss over the epoch's batches.
    pub train_loss: f64,
    /// Inference-mode accuracy on the whole training set after the epoch.
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Guard trips so far in the run.
    pub backoff_count: usize,
}

/// One guard trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Backoff {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
    /// Learning-rate scale after the trip.
    pub lr_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub backoffs: Vec<Backoff>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc,backoff_count";

pub fn write_metrics_csv(metrics: &[EpochMetrics], mut w: impl Write) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    for m in metrics {
        writeln!(
            w,
            "{},{:.8e},{:.8},{:.6},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            opt(m.val_loss),
            opt(m.val_acc),
            m.backoff_count
        )?;
    }
    Ok(())
}

/// Called before every batch with `(epoch, batch, model)`; epochs count
/// from 1. Used for fault injection.
pub type BatchHook<'a> = &'a mut dyn FnMut(usize, usize, &mut Model);

/// Optional observers and side effects of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub before_batch: Option<BatchHook<'a>>,
    /// When set, every clean epoch is saved as `epoch-NNN.ckpt` here.
    pub checkpoint_dir: Option<&'a Path>,
    pub after_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

/// Multiplies every trainable tensor by `factor` at one `(epoch, batch)`,
/// once.
pub struct WeightExplosion {
    pub epoch: usize,
    pub batch: usize,
    pub factor: f64,
    fired: bool,
}

impl WeightExplosion {
    pub fn new(epoch: usize, batch: usize, factor: f64) -> Self {
        WeightExplosion { epoch, batch, factor, fired: false }
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    pub fn apply(&mut self, epoch: usize, batch: usize, model: &mut Model) {
        if !self.fired && epoch == self.epoch && batch == self.batch {
            self.fired = true;
            for (_, t) in model.params_mut() {
                *t = t.map(|v| v * self.factor);
            }
        }
    }
}

/// Mean inference-mode loss and accuracy over `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk);
        let logits = model.forward(&x)?;
        loss += crate::nn::softmax_cross_entropy(&logits, &y)? * chunk.len() as f64;
        correct += count_correct(&logits, &y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best == l
        })
        .count()
}

fn all_finite(model: &Model) -> bool {
    model.params().iter().all(|(_, t)| t.all_finite()) && model.buffers().iter().all(|(_, t)| t.all_finite())
}

fn check_compatible(model: &Model, data: &Dataset, what: &str) -> Result<()> {
    let c = &model.config;
    if data.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    if data.image_shape()[0] != c.in_channels {
        return Err(Error::Config(format!(
            "{what} images have {} channels, the network expects {}",
            data.image_shape()[0],
            c.in_channels
        )));
    }
    if data.class_count > c.num_classes {
        return Err(Error::Config(format!(
            "{what} set has {} classes, the network predicts {}",
            data.class_count, c.num_classes
        )));
    }
    Ok(())
}

pub fn train(model: Model, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, val, cfg, TrainHooks::default())
}

/// Training loop with hooks; see the module documentation for the guard.
pub fn train_with(
    mut model: Model,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&model, data, "training")?;
    if let Some(v) = val {
        check_compatible(&model, v, "validation")?;
    }
    if !all_finite(&model) {
        return Err(Error::invalid("train", "initial model holds non-finite values"));
    }
    if let Some(dir) = hooks.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let batches = data.len().div_ceil(cfg.batch_size);
    let mut sgd = Sgd::from_config(cfg);
    let mut lr_scale = 1.0;
    let mut metrics = Vec::new();
    let mut backoffs = Vec::new();
    let mut epoch = 0;
    let mut retries = 0;
    while epoch < cfg.total_epochs {
        let saved = (model.clone(), sgd.clone());
        match run_epoch(&mut model, &mut sgd, data, cfg, epoch, batches, lr_scale, &mut hooks)? {
            Ok(train_loss) => {
                let (_, train_acc) = evaluate(&model, data, cfg.batch_size)?;
                let (val_loss, val_acc) = match val {
                    Some(v) => {
                        let (l, a) = evaluate(&model, v, cfg.batch_size)?;
                        (Some(l), Some(a))
                    }
                    None => (None, None),
                };
                let row = EpochMetrics {
                    epoch: epoch + 1,
                    lr: lr_at(epoch as f64, cfg)? * lr_scale,
                    train_loss,
                    train_acc,
                    val_loss,
                    val_acc,
                    backoff_count: backoffs.len(),
                };
                if let Some(dir) = hooks.checkpoint_dir {
                    save_checkpoint(&model, dir.join(format!("epoch-{:03}.ckpt", epoch + 1)))?;
                }
                if let Some(f) = hooks.after_epoch.as_mut() {
                    f(&row);
                }
                metrics.push(row);
                retries = 0;
                epoch += 1;
            }
            Err((batch, reason)) => {
                retries += 1;
                if retries > cfg.max_backoffs {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        reason: format!("{reason} after {} learning-rate backoffs", cfg.max_backoffs),
                    });
                }
                (model, sgd) = saved;
                lr_scale *= cfg.backoff_factor;
                backoffs.push(Backoff { epoch: epoch + 1, batch, reason, lr_scale });
            }
        }
    }
    Ok(TrainOutcome { model, metrics, backoffs })
}

/// Runs one epoch. The outer `Result` carries hard errors; the inner one is
/// the mean loss or the `(batch, reason)` of a guard trip.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    sgd: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    batches: usize,
    lr_scale: f64,
    hooks: &mut TrainHooks,
) -> Result<std::result::Result<f64, (usize, String)>> {
    // One stream per epoch: a rerun after a backoff sees the same batches.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if let Some(f) = hooks.before_batch.as_mut() {
            f(epoch + 1, b, model);
        }
        let (mut x, y) = data.gather(chunk);
        if cfg.augment_flip {
            let flips: Vec<bool> = (0..chunk.len()).map(|_| rng.random::<bool>()).collect();
            x = flip_horizontal(&x, &flips);
        }
        let lr = lr_at(epoch as f64 + b as f64 / batches as f64, cfg)? * lr_scale;
        let (loss, grads, _) = model.loss_and_grads(&x, &y, Mode::Train)?;
        if !loss.is_finite() {
            return Ok(Err((b, format!("non-finite loss {loss}"))));
        }
        if sgd_step(model, sgd, &grads, lr)? == StepOutcome::NonFinite {
            return Ok(Err((b, "non-finite gradient".into())));
        }
        if !all_finite(model) {
            return Ok(Err((b, "non-finite weights after update".into())));
        }
        total += loss * chunk.len() as f64;
    }
    Ok(Ok(total / data.len() as f64))
}
