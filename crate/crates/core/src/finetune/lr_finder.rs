use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, AdamState, AdamWParams};
use super::FineTuneError;

/// How the learning rate is read off the smoothed loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSelection {
    /// Steepest descent of the loss against `ln lr`, divided by ten.
    #[default]
    SteepestSlope,
    /// Learning rate at the smallest smoothed loss, divided by ten.
    MinLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrFinderOptions {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
    /// EMA factor of the loss smoothing.
    pub beta: f64,
    /// The sweep stops once the smoothed loss exceeds this multiple of its best value.
    pub divergence_factor: f64,
    pub selection: LrSelection,
}

impl Default for LrFinderOptions {
    fn default() -> Self {
        LrFinderOptions { lr_min: 1e-6, lr_max: 1.0, steps: 100, beta: 0.9, divergence_factor: 4.0, selection: LrSelection::SteepestSlope }
    }
}

impl LrFinderOptions {
    pub fn validate(&self) -> Result<(), FineTuneError> {
        if !(self.lr_min > 0.0 && self.lr_max > self.lr_min && self.lr_max.is_finite()) {
            return Err(FineTuneError::InvalidConfig("lr finder needs 0 < lr_min < lr_max".into()));
        }
        if self.steps < 2 || !(0.0..1.0).contains(&self.beta) || !(self.divergence_factor > 1.0) {
            return Err(FineTuneError::InvalidConfig("lr finder needs ≥ 2 steps, beta in [0, 1) and a divergence factor > 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FinderOptimizer {
    Sgd,
    AdamW(AdamWParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrFinderResult {
    pub lr: f64,
    /// Swept learning rates up to the point the sweep stopped.
    pub lrs: Vec<f64>,
    pub smoothed_losses: Vec<f64>,
}

/// Sweeps the learning rate log-uniformly from `lr_min` to `lr_max`, one update per
/// step. `loss_grad(params, step)` returns the mini-batch loss and gradient.
pub fn lr_finder<F>(params0: &[f64], mut loss_grad: F, opts: &LrFinderOptions, optimizer: FinderOptimizer) -> Result<LrFinderResult, FineTuneError>
where
    F: FnMut(&[f64], usize) -> (f64, Vec<f64>),
{
    opts.validate()?;
    let mut params = params0.to_vec();
    let mut state = AdamState::zeros(params.len());
    let ratio = (opts.lr_max / opts.lr_min).ln();
    let mut lrs = Vec::with_capacity(opts.steps);
    let mut smoothed = Vec::with_capacity(opts.steps);
    let (mut avg, mut best) = (0.0, f64::INFINITY);
    for i in 0..opts.steps {
        let lr = opts.lr_min * (ratio * i as f64 / (opts.steps - 1) as f64).exp();
        let (loss, grad) = loss_grad(&params, i);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            if i == 0 {
                return Err(FineTuneError::DivergedImmediately);
            }
            break;
        }
        avg = opts.beta * avg + (1.0 - opts.beta) * loss;
        let s = avg / (1.0 - opts.beta.powi(i as i32 + 1));
        if i > 0 && s > opts.divergence_factor * best {
            break;
        }
        best = best.min(s);
        lrs.push(lr);
        smoothed.push(s);
        match optimizer {
            FinderOptimizer::Sgd => params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g),
            FinderOptimizer::AdamW(hp) => adamw_step(&mut params, &grad, &mut state, lr, &hp, i as u64 + 1)?,
        }
    }
    let pick = match opts.selection {
        LrSelection::SteepestSlope if lrs.len() >= 2 => (0..lrs.len() - 1)
            .map(|i| (i, (smoothed[i + 1] - smoothed[i]) / (lrs[i + 1] / lrs[i]).ln()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap_or(0),
        LrSelection::SteepestSlope => 0,
        LrSelection::MinLoss => smoothed.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0),
    };
    let lr = (lrs[pick] / 10.0).clamp(opts.lr_min, opts.lr_max);
    Ok(LrFinderResult { lr, lrs, smoothed_losses: smoothed })
}
