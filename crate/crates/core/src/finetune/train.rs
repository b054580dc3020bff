use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{Activation, Head};
use super::loss::{Objective, Targets};
use super::lr_finder::{lr_finder, FinderOptimizer};
use super::optim::{adamw_step, clip_by_value, exponential_lr, AdamState};
use super::split::split_groups;
use super::{FineTuneConfig, FineTuneError, FineTuneMode, LossHistory, TrainingReport};
use crate::metrics::evaluate_dataset;

/// Emitted after every finished epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochProgress {
    /// Epochs completed so far.
    pub epochs_done: usize,
    pub max_epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub const MIN_SAMPLES: usize = 10;

pub fn train_head(
    embeddings: &[Vec<f64>],
    labels: &[Vec<String>],
    base_model: &str,
    cfg: &FineTuneConfig,
) -> Result<(Head, TrainingReport), FineTuneError> {
    train_head_with(embeddings, labels, base_model, cfg, &mut |_| true)
}

struct Prepared {
    classes: Vec<String>,
    targets: Targets,
    split_keys: Vec<String>,
    distribution: BTreeMap<String, usize>,
}

fn prepare(embeddings: &[Vec<f64>], labels: &[Vec<String>]) -> Result<Prepared, FineTuneError> {
    if embeddings.len() != labels.len() {
        return Err(FineTuneError::ShapeMismatch(format!("{} embeddings, {} label rows", embeddings.len(), labels.len())));
    }
    if embeddings.len() < MIN_SAMPLES {
        return Err(FineTuneError::TooFewSamples { needed: MIN_SAMPLES, got: embeddings.len() });
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(FineTuneError::ShapeMismatch("embeddings must share one non-zero width".into()));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FineTuneError::ShapeMismatch("non-finite embedding value".into()));
    }
    let sets: Vec<BTreeSet<&str>> = labels.iter().map(|l| l.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect()).collect();
    let mut distribution: BTreeMap<String, usize> = BTreeMap::new();
    for s in &sets {
        for l in s {
            *distribution.entry(l.to_string()).or_default() += 1;
        }
    }
    if distribution.len() < 2 {
        return Err(FineTuneError::TooFewClasses(distribution.len()));
    }
    if let Some((class, &count)) = distribution.iter().find(|(_, &c)| c < 2) {
        return Err(FineTuneError::ClassTooSmall { class: class.clone(), count });
    }
    let classes: Vec<String> = distribution.keys().cloned().collect();
    let index = |l: &str| classes.iter().position(|c| c == l).expect("class collected above");
    let multi = sets.iter().any(|s| s.len() != 1);
    let (targets, split_keys) = if multi {
        let flags = sets.iter().map(|s| classes.iter().map(|c| s.contains(c.as_str())).collect()).collect();
        // stratify on each sample's rarest label
        let keys = sets
            .iter()
            .map(|s| s.iter().min_by_key(|l| (distribution[**l], **l)).map(|l| l.to_string()).unwrap_or_default())
            .collect();
        (Targets::Multi(flags), keys)
    } else {
        let t: Vec<usize> = sets.iter().map(|s| index(s.iter().next().expect("one label"))).collect();
        let keys = t.iter().map(|&k| classes[k].clone()).collect();
        (Targets::Single(t), keys)
    };
    Ok(Prepared { classes, targets, split_keys, distribution })
}

/// Trains a head and reports each epoch to `on_epoch`; returning `false` from the
/// callback cancels the run.
pub fn train_head_with(
    embeddings: &[Vec<f64>],
    labels: &[Vec<String>],
    base_model: &str,
    cfg: &FineTuneConfig,
    on_epoch: &mut dyn FnMut(&EpochProgress) -> bool,
) -> Result<(Head, TrainingReport), FineTuneError> {
    cfg.validate()?;
    if cfg.mode == FineTuneMode::Full {
        return Err(FineTuneError::UnsupportedAtDeskScale);
    }
    let prep = prepare(embeddings, labels)?;
    let multi = matches!(prep.targets, Targets::Multi(_));
    let (train, val) = split_groups(&prep.split_keys, cfg.val_fraction, cfg.seed, !multi)?;
    let n_classes = prep.classes.len();
    let activation = if multi { Activation::Sigmoid } else { Activation::Softmax };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Head::init(cfg.head, embeddings[0].len(), prep.classes.clone(), activation, &mut rng);
    let objective = Objective::fit(&prep.targets, n_classes, &train);
    let hp = cfg.adamw();

    let lr0 = match cfg.lr {
        Some(lr) => lr,
        None => {
            let mut order = train.clone();
            order.shuffle(&mut rng);
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            let mut probe = head.clone();
            lr_finder(
                &head.params(),
                |p, step| {
                    probe.set_params(p).expect("same head");
                    let (loss, mut g) = objective.loss_and_grad(&probe, embeddings, &prep.targets, batches[step % batches.len()]);
                    clip_by_value(&mut g, cfg.grad_clip_value);
                    (loss, g)
                },
                &cfg.lr_finder,
                FinderOptimizer::AdamW(hp),
            )?
            .lr
        }
    };

    let mut params = head.params();
    let mut state = AdamState::zeros(params.len());
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut order = train.clone();
    let mut t = 0u64;
    for epoch in 0..cfg.max_epochs {
        let lr = exponential_lr(lr0, cfg.gamma, epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, mut g) = objective.loss_and_grad(&head, embeddings, &prep.targets, batch);
            clip_by_value(&mut g, cfg.grad_clip_value);
            t += 1;
            adamw_step(&mut params, &g, &mut state, lr, &hp, t)?;
            head.set_params(&params)?;
        }
        let tl = objective.loss(&head, embeddings, &prep.targets, &train);
        let vl = objective.loss(&head, embeddings, &prep.targets, &val);
        if !tl.is_finite() || !vl.is_finite() {
            return Err(FineTuneError::NonFiniteLoss { epoch });
        }
        train_losses.push(tl);
        val_losses.push(vl);
        if vl < best.0 {
            best = (vl, epoch, params.clone());
        }
        let progress = EpochProgress { epochs_done: epoch + 1, max_epochs: cfg.max_epochs, train_loss: tl, val_loss: vl };
        if !on_epoch(&progress) {
            return Err(FineTuneError::Cancelled);
        }
        if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    head.set_params(&best.2)?;

    let val_x: Vec<Vec<f64>> = val.iter().map(|&i| embeddings[i].clone()).collect();
    let mut rows = super::head::predict(&head, &val_x)?;
    if activation == Activation::Softmax {
        rows = rows.into_iter().map(|r| one_hot_argmax(&r)).collect();
    }
    let val_truth: Vec<Vec<String>> = val.iter().map(|&i| truth_labels(&prep, i)).collect();
    let eval_f1 = evaluate_dataset(&val_truth, &rows, &prep.classes, 0.5)
        .map_err(|e| FineTuneError::ShapeMismatch(e.to_string()))?;

    let report = TrainingReport {
        n_samples: embeddings.len(),
        label_distribution: prep.distribution,
        base_model: base_model.to_string(),
        losses: LossHistory { train_loss_per_epoch: train_losses, val_loss_per_epoch: val_losses, best_epoch: best.1, lr_used: lr0 },
        eval_f1,
    };
    Ok((head, report))
}

fn truth_labels(prep: &Prepared, i: usize) -> Vec<String> {
    match &prep.targets {
        Targets::Single(t) => vec![prep.classes[t[i]].clone()],
        Targets::Multi(t) => prep.classes.iter().zip(&t[i]).filter(|(_, &on)| on).map(|(c, _)| c.clone()).collect(),
    }
}

/// Single-label decision: the most probable class, lowest index on ties.
fn one_hot_argmax(p: &[f64]) -> Vec<f64> {
    let best = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
    (0..p.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
}
