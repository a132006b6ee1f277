//! Optimizer, schedule, augmentation and the pretraining / fine-tuning /
//! kNN protocols.

mod augment;
mod finetune;
mod knn;
mod pretrain;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::mask::{DirichletAlphas, MaskError, SamplingStrategy};
use crate::model::{ModelError, ModelParams};
use crate::tensor::{Tensor, TensorError};

pub use augment::{augment, augment_with, flip_horizontal, AugmentTrace};
pub use finetune::{finetune, predict, EvalReport};
pub use knn::{cosine, embed_dataset, knn_accuracy, knn_eval, knn_predict};
pub use pretrain::{pretrain, pretrain_init, pretrain_run, sample_loss_and_grads, PretrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical fault at epoch {epoch}, step {step}: {detail}")]
    NumericalFault {
        epoch: usize,
        step: usize,
        detail: String,
        /// State after the last completed step.
        last_good: Box<PretrainState>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Masking ratio for single-modality pretraining, and the source of the
    /// budget when `budget` is unset.
    pub ratio: f64,
    /// Visible-token budget for multi-modal pretraining.
    pub budget: Option<usize>,
    pub alphas: DirichletAlphas,
    pub strategy: SamplingStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            budget: None,
            alphas: DirichletAlphas::default(),
            strategy: SamplingStrategy::MaskOne,
        }
    }
}

impl MaskConfig {
    pub fn budget_for(&self, num_positions: usize) -> usize {
        self.budget
            .unwrap_or_else(|| crate::mask::budget_from_ratio(num_positions, self.ratio))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the tile.
    pub scale: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: [0.8, 1.0],
            flip_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask: MaskConfig,
    pub norm_pix: bool,
    pub augment: AugmentConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Cross-validation folds for fine-tuning.
    pub folds: usize,
    /// Fine-tune only the head.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_pretrain()
    }
}

impl TrainConfig {
    pub fn full_scale_pretrain() -> Self {
        Self {
            mode: Mode::Pretrain,
            base_lr: 1e-4,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            epochs: 1600,
            warmup_epochs: 40,
            warmup_start_lr: 1e-6,
            batch_size: 312,
            seed: 0,
            mask: MaskConfig {
                ratio: 0.15,
                budget: Some(190),
                ..MaskConfig::default()
            },
            norm_pix: true,
            augment: AugmentConfig::default(),
            clip_norm: 5.0,
            folds: 5,
            freeze_encoder: false,
        }
    }

    pub fn full_scale_finetune() -> Self {
        Self {
            mode: Mode::Finetune,
            base_lr: 3e-3,
            weight_decay: 6e-5,
            epochs: 100,
            warmup_epochs: 5,
            batch_size: 96,
            ..Self::full_scale_pretrain()
        }
    }

    /// 32-pixel synthetic tiles, a few hundred steps.
    pub fn desk_pretrain() -> Self {
        Self {
            base_lr: 2e-3,
            weight_decay: 0.05,
            epochs: 8,
            warmup_epochs: 1,
            batch_size: 16,
            mask: MaskConfig {
                ratio: 0.5,
                budget: None,
                ..MaskConfig::default()
            },
            norm_pix: false,
            ..Self::full_scale_pretrain()
        }
    }

    pub fn desk_finetune() -> Self {
        Self {
            mode: Mode::Finetune,
            base_lr: 3e-3,
            weight_decay: 6e-5,
            epochs: 30,
            warmup_epochs: 1,
            batch_size: 16,
            ..Self::desk_pretrain()
        }
    }

    /// Head-only training on a frozen encoder.
    pub fn desk_probe() -> Self {
        Self {
            base_lr: 1e-2,
            epochs: 60,
            freeze_encoder: true,
            ..Self::desk_finetune()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0 && self.warmup_start_lr > 0.0 && self.adam_eps > 0.0) {
            return bad("learning rates and adam_eps must be positive".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        let [lo, hi] = self.augment.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop scale range [{lo}, {hi}] must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return bad("flip_prob must be in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.folds < 2 {
            return bad("at least 2 folds are needed".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive".into());
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask.ratio));
        }
        self.mask.alphas.validate()?;
        Ok(())
    }
}

/// Linear warmup from `warmup_start_lr` to `base_lr`, then a half cosine
/// down to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub start_lr: f64,
    pub base_lr: f64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
            start_lr: cfg.warmup_start_lr,
            base_lr: cfg.base_lr,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.start_lr + (self.base_lr - self.start_lr) * t;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return 0.0;
        }
        let t = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Learning rate at `step` of `total_steps`, with the warmup taking the
/// same share of steps as `warmup_epochs` of `epochs`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    Schedule {
        warmup_steps: total_steps * cfg.warmup_epochs / cfg.epochs.max(1),
        total_steps,
        start_lr: cfg.warmup_start_lr,
        base_lr: cfg.base_lr,
    }
    .at(step)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.adam_eps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// Only matrix weights of linear maps are decayed; biases, norms, the
/// global token and the mask token are not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// One AdamW update over the parameters that have gradients: decoupled
/// decay `p −= lr·wd·p`, then the bias-corrected Adam step.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<(), TrainError> {
    if lr.is_nan() || lr < 0.0 {
        return Err(TrainError::Contract(format!("learning rate {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::Contract(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    params.update(|name, p| {
        let Some(g) = grads.get(name) else { return };
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
        let wd = if decays(name) { weight_decay } else { 0.0 };
        for (((x, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *x -= lr * wd * *x;
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    });
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `epoch,loss` rows, epochs counted from 1.
pub fn write_loss_csv(losses: &[f64], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// `fold,accuracy` rows, folds counted from 1.
pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "accuracy"])?;
    for (i, a) in report.fold_accuracies.iter().enumerate() {
        w.write_record([(i + 1).to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable summary of a report.
pub fn write_report_text(report: &EvalReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "accuracy {:.6}", report.accuracy)?;
    writeln!(out, "num_labeled {}", report.num_labeled)?;
    if let Some(k) = report.k {
        writeln!(out, "k {k}")?;
    }
    for (i, a) in report.fold_accuracies.iter().enumerate() {
        writeln!(out, "fold {} {:.6}", i + 1, a)?;
    }
    Ok(())
}
