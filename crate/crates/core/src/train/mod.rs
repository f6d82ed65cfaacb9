//! Optimisation, the training loop, evaluation metrics and the ablation
//! runner.

mod ablation;
mod metrics;
mod optim;

pub use ablation::{
    ablation_run, cell_seed, results_csv, write_results_csv, AblationCell, AblationOptions, AblationRow, RESULTS_HEADER,
};
pub use metrics::{
    confusion_matrix, metrics_from_confusion, ClassCounts, ClassMetrics, ConfusionMatrix, MetricsReport,
    METRICS_HEADER,
};
pub use optim::{adamw_step, adamw_update, AdamWConfig, AdamWState};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{ParamStore, Tape};
use crate::config::KeyValues;
use crate::data::{augment_views, preprocess, ViewSet, Wavelength};
use crate::error::{invalid, Error, Result};
use crate::models::{Fusion, Model};
use crate::nn::{apply_bn_updates, Ctx, Phase, BN_MOMENTUM};
use crate::tensor::Tensor;
use crate::util::derive_seed;

const SHUFFLE_TAG: u64 = 1;
const AUGMENT_TAG: u64 = 2;

/// Training recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub weight_decay: f64,
    /// Length of the linear warmup, in epochs.
    pub warmup_epochs: f64,
    /// Exponential decay factor per epoch after warmup.
    pub decay: f64,
    pub seed: u64,
    /// Views fed to the model, in order.
    pub wavelengths: Vec<Wavelength>,
    pub fusion: Fusion,
    /// Side of the preprocessed square images.
    pub image_size: usize,
    pub augment: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.05,
            warmup_epochs: 1.0,
            decay: 0.97,
            seed: 0,
            wavelengths: Wavelength::ALL.to_vec(),
            fusion: Fusion::Max,
            image_size: 64,
            augment: true,
            max_steps: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch-size",
    "lr",
    "weight-decay",
    "warmup-epochs",
    "decay",
    "seed",
    "wavelengths",
    "fusion",
    "image-size",
    "augment",
    "max-steps",
];

/// Parses a comma-separated wavelength list such as `557.7,630.0`.
pub fn parse_wavelengths(s: &str) -> Result<Vec<Wavelength>> {
    let ws = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<Vec<Wavelength>>>()?;
    if ws.is_empty() {
        return Err(invalid("empty wavelength list"));
    }
    Ok(ws)
}

pub fn format_wavelengths(ws: &[Wavelength]) -> String {
    ws.iter().map(|w| w.tag()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid(format!("decay factor {} is not in (0, 1]", self.decay)));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.warmup_epochs >= 0.0) {
            return Err(invalid("lr, weight decay and warmup must be non-negative"));
        }
        if self.wavelengths.is_empty() || self.image_size == 0 {
            return Err(invalid("at least one wavelength and a non-zero image size are required"));
        }
        Ok(())
    }

    /// Reads the keys in [`TRAIN_KEYS`]; missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let wavelengths = match kv.raw("wavelengths") {
            Some(s) => parse_wavelengths(s).map_err(|e| Error::Usage(format!("--wavelengths: {e}")))?,
            None => d.wavelengths,
        };
        let c = Self {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch-size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            weight_decay: kv.get_or("weight-decay", d.weight_decay)?,
            warmup_epochs: kv.get_or("warmup-epochs", d.warmup_epochs)?,
            decay: kv.get_or("decay", d.decay)?,
            seed: kv.get_or("seed", d.seed)?,
            wavelengths,
            fusion: kv.get_or("fusion", d.fusion)?,
            image_size: kv.get_or("image-size", d.image_size)?,
            augment: kv.get_or("augment", d.augment)?,
            max_steps: kv.get("max-steps")?,
        };
        c.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(c)
    }
}

/// Learning rate at optimizer step `step` (0-based). With epoch fraction
/// `f = step / steps_per_epoch` and warmup `w` epochs: `base·f/w` while
/// `f < w`, then `base·decay^(f − w)`.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let f = step as f64 / steps_per_epoch.max(1) as f64;
    let w = cfg.warmup_epochs;
    if w > 0.0 && f < w {
        cfg.lr * f / w
    } else {
        cfg.lr * cfg.decay.powf(f - w)
    }
}

/// Preprocessed views and labels ready for batching.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub wavelengths: Vec<Wavelength>,
    /// Per sample, one `(1, 1, S, S)` tensor per wavelength.
    pub views: Vec<Vec<Tensor<f32>>>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Prepared {
        Prepared {
            wavelengths: self.wavelengths.clone(),
            views: self.views[..n.min(self.len())].to_vec(),
            labels: self.labels[..n.min(self.len())].to_vec(),
        }
    }

    /// View batches `(B, 1, S, S)` for the samples at `idx`, optionally
    /// augmented per sample.
    fn batch(&self, idx: &[usize], augment: Option<(u64, usize)>) -> Result<Vec<Tensor<f32>>> {
        let samples: Vec<Vec<Tensor<f32>>> = idx
            .iter()
            .map(|&i| match augment {
                Some((seed, epoch)) => {
                    augment_views(&self.views[i], derive_seed(seed, &[AUGMENT_TAG, epoch as u64, i as u64]))
                }
                None => Ok(self.views[i].clone()),
            })
            .collect::<Result<_>>()?;
        (0..self.wavelengths.len())
            .map(|j| Tensor::stack_batch(&samples.iter().map(|s| &s[j]).collect::<Vec<_>>()))
            .collect()
    }
}

/// Preprocesses the chosen wavelengths of `samples` to `size × size`.
pub fn prepare(samples: &[&ViewSet], wavelengths: &[Wavelength], size: usize) -> Result<Prepared> {
    let views = samples
        .par_iter()
        .map(|s| wavelengths.iter().map(|&w| preprocess(s.view(w), size)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok(Prepared {
        wavelengths: wavelengths.to_vec(),
        views,
        labels: samples.iter().map(|s| s.class.code()).collect(),
    })
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// 1-based epoch.
    pub epoch: usize,
    /// 0-based index of the epoch's last optimizer step.
    pub step: usize,
    /// Learning rate used at `step`.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy on the validation set, when one was given.
    pub val_acc: Option<f64>,
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "step", "lr", "train_loss", "val_acc"];

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:e}", r.lr),
            r.train_loss.to_string(),
            r.val_acc.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(format!("history buffer: {e}")))?;
    crate::util::write_atomic(path, &bytes)
}

/// Trained parameters and the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub history: Vec<HistoryRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Splits `order` into batches of `size`; a trailing single sample joins
/// the previous batch so train-mode batch norm never sees a batch of one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        out[n - 1] = &order[(n - 1) * size..];
    }
    out
}

/// Trains `store` in place of a fresh copy and returns it with the
/// history. Deterministic in `cfg.seed`: the data order is shuffled and
/// each sample augmented from seeds derived from it. `on_epoch` sees each
/// history row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    model: &Model,
    store: ParamStore<f32>,
    train_set: &Prepared,
    val_set: Option<&Prepared>,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if train_set.wavelengths.len() != model.config.views {
        return Err(invalid(format!(
            "model takes {} views but the data has {}",
            model.config.views,
            train_set.wavelengths.len()
        )));
    }
    let mut store = store;
    let hp = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new();
    let steps_per_epoch = batches(&(0..train_set.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let mut step = 0;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SHUFFLE_TAG, epoch as u64])));
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            lr = lr_schedule(step, steps_per_epoch, cfg);
            let views = train_set.batch(idx, cfg.augment.then_some((cfg.seed, epoch)))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, true, Phase::Training);
            let vars: Vec<_> = views.into_iter().map(|v| ctx.tape.constant(v)).collect();
            let logits = model.forward(&mut ctx, &vars)?;
            let loss = ctx.tape.cross_entropy(logits, &labels)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let loss_value = f64::from(tape.value(loss).data()[0]);
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    lr,
                    loss: loss_value,
                });
            }
            let grads = tape.backward(loss)?;
            adamw_step(&mut store, &grads, &mut state, lr, &hp)?;
            apply_bn_updates(&mut store, &updates, BN_MOMENTUM)?;
            losses.push(loss_value);
            step_losses.push(loss_value);
            step += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let val_acc = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate(model, &store, Phase::Training, v, cfg.batch_size)?.1.acc),
            _ => None,
        };
        let row = HistoryRow {
            epoch: epoch + 1,
            step: step - 1,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_acc,
        };
        on_epoch(&row);
        history.push(row);
    }
    Ok(TrainOutcome {
        store,
        history,
        step_losses,
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class predictions, `batch` samples per forward pass.
pub fn predict_classes(
    model: &Model,
    store: &ParamStore<f32>,
    phase: Phase,
    data: &Prepared,
    batch: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let logits = model.predict(store, phase, &data.batch(chunk, None)?)?;
        let k = logits.shape().c;
        preds.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(preds)
}

/// Confusion matrix and metrics of eval-mode predictions on `data`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    phase: Phase,
    data: &Prepared,
    batch: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let preds = predict_classes(model, store, phase, data, batch)?;
    let cm = confusion_matrix(&preds, &data.labels, model.config.num_classes)?;
    let report = metrics_from_confusion(&cm);
    Ok((cm, report))
}
