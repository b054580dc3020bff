//! Classification-head fine-tuning on frozen ECG embeddings.
//!
//! The pipeline is `embed` → `stratified_split` → optional `lr_finder` →
//! `train_head` (AdamW, exponential decay, value clipping, checkpointing on the
//! class-weighted validation loss, early stopping) → `predict`.

mod embed;
mod head;
mod loss;
mod lr_finder;
mod optim;
mod split;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::metrics::EvaluationReport;

pub use embed::{embed, embed_all, EMBED_DIM};
pub use head::{predict, Activation, Head, HeadKind, LinearHead, MlpHead};
pub use loss::{class_weights, Objective, Targets};
pub use lr_finder::{lr_finder, FinderOptimizer, LrFinderOptions, LrFinderResult, LrSelection};
pub use optim::{adamw_step, clip_by_value, exponential_lr, AdamState, AdamWParams};
pub use split::stratified_split;
pub use train::{train_head, train_head_with, EpochProgress, MIN_SAMPLES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FineTuneError {
    #[error("class `{class}` has {count} sample(s); at least 2 are needed")]
    ClassTooSmall { class: String, count: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("loss is non-finite already at the smallest learning rate")]
    DivergedImmediately,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("full-model fine-tuning is not supported; train the head only")]
    UnsupportedAtDeskScale,
    #[error("training was cancelled")]
    Cancelled,
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl FineTuneError {
    pub fn code(&self) -> &'static str {
        match self {
            FineTuneError::ClassTooSmall { .. } => "class_too_small",
            FineTuneError::TooFewClasses(_) => "too_few_classes",
            FineTuneError::TooFewSamples { .. } => "too_few_samples",
            FineTuneError::ShapeMismatch(_) => "shape_mismatch",
            FineTuneError::NonFiniteLoss { .. } => "non_finite_loss",
            FineTuneError::DivergedImmediately => "diverged_immediately",
            FineTuneError::InvalidConfig(_) => "invalid_config",
            FineTuneError::UnsupportedAtDeskScale => "unsupported_at_desk_scale",
            FineTuneError::Cancelled => "cancelled",
            FineTuneError::Analysis(e) => e.code(),
        }
    }
}

/// Which parameters are trained. Only the head is trainable here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    #[default]
    Head,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub mode: FineTuneMode,
    pub head: HeadKind,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Initial learning rate; `None` runs the finder.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip_value: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub lr_finder: LrFinderOptions,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            mode: FineTuneMode::Head,
            head: HeadKind::Linear,
            max_epochs: 50,
            batch_size: 64,
            gamma: 0.9,
            lr: None,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip_value: 2.0,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            lr_finder: LrFinderOptions::default(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<(), FineTuneError> {
        let bad = |m: &str| Err(FineTuneError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return bad("patience, max_epochs and batch_size must be positive");
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return bad("lr must be positive");
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.grad_clip_value > 0.0) {
            return bad("eps and grad_clip_value must be positive, weight_decay non-negative");
        }
        if let HeadKind::Mlp { hidden: 0 } = self.head {
            return bad("mlp hidden width must be positive");
        }
        self.lr_finder.validate()
    }

    pub(crate) fn adamw(&self) -> AdamWParams {
        AdamWParams { beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Per-epoch losses with the checkpoint that was kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train_loss_per_epoch: Vec<f64>,
    pub val_loss_per_epoch: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub lr_used: f64,
}

/// Summary of one fine-tuning run: sample count, label distribution, base model,
/// per-epoch losses and validation F1 scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingReport {
    pub n_samples: usize,
    pub label_distribution: BTreeMap<String, usize>,
    pub base_model: String,
    pub losses: LossHistory,
    pub eval_f1: EvaluationReport,
}
