use serde::{Deserialize, Serialize};

use super::head::{sigmoid, Activation, Head};
use crate::moa::softplus;

/// Training targets, indexed like the embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// One class index per sample.
    Single(Vec<usize>),
    /// Class membership flags per sample.
    Multi(Vec<Vec<bool>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Single(t) => t.len(),
            Targets::Multi(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positive count per class over `idx`.
    pub fn counts(&self, n_classes: usize, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for &i in idx {
            match self {
                Targets::Single(t) => c[t[i]] += 1,
                Targets::Multi(t) => t[i].iter().enumerate().filter(|(_, &on)| on).for_each(|(k, _)| c[k] += 1),
            }
        }
        c
    }
}

/// Balanced inverse-frequency weights `n / (C · n_c)`; absent classes get 0.
pub fn class_weights(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let c = counts.len() as f64;
    counts.iter().map(|&k| if k == 0 { 0.0 } else { n as f64 / (c * k as f64) }).collect()
}

/// Class-weighted loss: weighted-mean cross-entropy for softmax heads, binary
/// cross-entropy with per-class positive weights for sigmoid heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub activation: Activation,
    /// Class weights (softmax) or positive-example weights `neg / pos` (sigmoid).
    pub weights: Vec<f64>,
}

impl Objective {
    /// Weights estimated on the samples in `idx`.
    pub fn fit(targets: &Targets, n_classes: usize, idx: &[usize]) -> Self {
        let counts = targets.counts(n_classes, idx);
        match targets {
            Targets::Single(_) => Objective { activation: Activation::Softmax, weights: class_weights(&counts) },
            Targets::Multi(_) => Objective {
                activation: Activation::Sigmoid,
                weights: counts
                    .iter()
                    .map(|&pos| if pos == 0 { 1.0 } else { (idx.len() - pos) as f64 / pos as f64 })
                    .collect(),
            },
        }
    }

    pub fn loss(&self, head: &Head, xs: &[Vec<f64>], targets: &Targets, idx: &[usize]) -> f64 {
        self.eval(head, xs, targets, idx, None)
    }

    pub fn loss_and_grad(&self, head: &Head, xs: &[Vec<f64>], targets: &Targets, idx: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; head.n_params()];
        let loss = self.eval(head, xs, targets, idx, Some(&mut grad));
        (loss, grad)
    }

    fn eval(&self, head: &Head, xs: &[Vec<f64>], targets: &Targets, idx: &[usize], mut grad: Option<&mut Vec<f64>>) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        match targets {
            Targets::Single(t) => {
                let total: f64 = idx.iter().map(|&i| self.weights[t[i]]).sum();
                if total == 0.0 {
                    return 0.0;
                }
                let mut loss = 0.0;
                for &i in idx {
                    let z = head.logits(&xs[i]);
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    let w = self.weights[t[i]] / total;
                    loss += w * (lse - z[t[i]]);
                    if let Some(g) = grad.as_deref_mut() {
                        let dl: Vec<f64> = z
                            .iter()
                            .enumerate()
                            .map(|(k, &zk)| w * ((zk - lse).exp() - if k == t[i] { 1.0 } else { 0.0 }))
                            .collect();
                        head.accumulate_grad(&xs[i], &dl, g);
                    }
                }
                loss
            }
            Targets::Multi(t) => {
                let scale = 1.0 / (idx.len() * self.weights.len()) as f64;
                let mut loss = 0.0;
                for &i in idx {
                    let z = head.logits(&xs[i]);
                    let mut dl = vec![0.0; z.len()];
                    for (k, &zk) in z.iter().enumerate() {
                        let pw = self.weights[k];
                        let y = if t[i][k] { 1.0 } else { 0.0 };
                        loss += scale * (pw * y * softplus(-zk) + (1.0 - y) * softplus(zk));
                        dl[k] = scale * (sigmoid(zk) * (pw * y + 1.0 - y) - pw * y);
                    }
                    if let Some(g) = grad.as_deref_mut() {
                        head.accumulate_grad(&xs[i], &dl, g);
                    }
                }
                loss
            }
        }
    }
}
