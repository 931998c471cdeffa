//! MSE training with AdamW, a one-cycle cosine schedule, global-norm
//! clipping, and selection of the epoch with the best validation Pearson.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brain_encoder::{sample_mask_within, BrainEncoder, Checkpoint, Pass};
use crate::evaluator::score_model;
use crate::feature_store::{Dataset, Split, TargetNorm};
use crate::nn::Precision;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Fraction of each subject's windows held out for validation.
    pub val_fraction: f64,
    /// Z-score targets per subject and parcel with training statistics.
    pub normalize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            weight_decay: 1e-2,
            epochs: 15,
            batch_size: 16,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            seed: 33,
            precision: Precision::Full,
            val_fraction: 0.2,
            normalize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("peak_lr and clip_norm must be positive, weight_decay non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warm-up to `peak_lr` over `ceil(warmup_fraction * total)` steps,
/// then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.peak_lr;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    0.5 * cfg.peak_lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let decay = 1.0 - lr * weight_decay;
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pearson: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation Pearson.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_pearson: f64,
    /// Learning rate used at each update, in order.
    pub lr_trace: Vec<f64>,
    /// Tab-separated log: `step\t<n>\t<lr>\t<loss>` and `epoch\t<n>\t<val>`.
    pub log: String,
}

fn mse_grad(pred: &Array2<f64>, target: &Array2<f64>, batch: usize) -> (f64, Array2<f64>) {
    let diff = pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / (n * batch as f64)))
}

/// Trains `model` in place on `split.train` and returns the best snapshot.
pub fn train(mut model: BrainEncoder, data: &Dataset, split: &Split, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    if data.n_subjects > model.heads.len() {
        return Err(Error::config(format!(
            "dataset has {} subjects, model has {} heads",
            data.n_subjects,
            model.heads.len()
        )));
    }
    model.config.precision = cfg.precision;
    let norm = cfg.normalize_targets.then(|| TargetNorm::fit(data, &split.train));
    let targets: Vec<Array2<f64>> = data
        .windows
        .iter()
        .map(|w| {
            let mut t = w.target.clone();
            if let Some(n) = &norm {
                for mut row in t.rows_mut() {
                    row -= &n.mean.row(w.subject);
                    row /= &n.std.row(w.subject);
                }
            }
            t
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.params);
    let mut grads = model.params.zeros_like();
    let mut order = split.train.clone();
    let allowed = model.config.modalities;
    let drop_p = model.config.encoder.modality_dropout_p;

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lr_trace = Vec::with_capacity(total);
    let mut log = String::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let mut loss = 0.0;
            for &i in batch {
                let w = &data.windows[i];
                let active = sample_mask_within(allowed, drop_p, &mut rng);
                let out = model.forward(&w.features, w.subject, Pass { active, capture: false }, Some(&mut rng))?;
                let (l, d) = mse_grad(&out.prediction, &targets[i], batch.len());
                loss += l / batch.len() as f64;
                model.backward(&out, d.view(), &mut grads);
            }
            step += 1;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NumericalAbort { step, loss });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_at(step, total, cfg);
            opt.step(&mut model.params, &grads, lr, cfg.weight_decay);
            lr_trace.push(lr);
            epoch_loss += loss * batch.len() as f64;
            let _ = writeln!(log, "step\t{step}\t{lr:e}\t{loss:.10e}");
        }
        let val = score_model(&model, data, &split.val, allowed)?.mean();
        let _ = writeln!(log, "epoch\t{epoch}\t{val:.10}");
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / split.train.len() as f64,
            val_pearson: val,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val > *b) {
            best = Some((val, epoch, model.params.clone()));
        }
    }
    let (best_val, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let meta = serde_json::json!({
        "best_epoch": best_epoch,
        "val_pearson": best_val,
        "seed": cfg.seed,
        "train": cfg,
    });
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            target_norm: norm,
            meta,
        },
        history,
        best_epoch,
        best_val_pearson: best_val,
        lr_trace,
        log,
    })
}
