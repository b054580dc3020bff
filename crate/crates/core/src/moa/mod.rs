//! Mixture-of-architectures routing: noisy top-k gating with Gumbel-Softmax
//! annealing, the balance/entropy/MMD losses, time-series positional encoding,
//! and a finite-difference gradient oracle.

mod forward;
mod gradient;
mod losses;
mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forward::{combine_experts, moa_forward, AffineExpert, ConvRouter, Expert, LATENT_DIM};
pub use gradient::numeric_gradient;
pub use losses::{
    load_balance_grad, load_balance_loss, median_bandwidth, mmd_grad_x, mmd_loss, rbf_kernel, route_entropy_grad,
    route_entropy_loss, MoaLosses,
};
pub use tape::{tape_encoding, TapeEncoding};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoaError {
    #[error("expected {expected} values, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("embedding dimension {0} is odd")]
    OddDim(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("function is not finite at the probed point (coordinate {0})")]
    NonFiniteEvaluation(usize),
    #[error("invalid router config: {0}")]
    InvalidConfig(String),
}

impl MoaError {
    pub fn code(&self) -> &'static str {
        match self {
            MoaError::BadLength { .. } => "bad_length",
            MoaError::NonPositiveTau(_) => "non_positive_tau",
            MoaError::EmptyBatch => "empty_batch",
            MoaError::OddDim(_) => "odd_dim",
            MoaError::DimMismatch(_) => "dim_mismatch",
            MoaError::NonFiniteEvaluation(_) => "non_finite_evaluation",
            MoaError::InvalidConfig(_) => "invalid_config",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub n_experts: usize,
    pub k: usize,
    pub gumbel_tau0: f64,
    pub gumbel_tau_min: f64,
    /// Per-step (epoch) multiplicative decay of the temperature.
    pub gumbel_decay: f64,
    /// Raw per-expert noise parameters; the noise standard deviation is `softplus(noise_scale[i])`.
    pub noise_scale: Vec<f64>,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            n_experts: 4,
            k: 2,
            gumbel_tau0: 1.0,
            gumbel_tau_min: 0.1,
            gumbel_decay: 0.97,
            noise_scale: vec![0.0; 4],
            seed: 0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), MoaError> {
        if self.k < 1 || self.k > self.n_experts {
            return Err(MoaError::InvalidConfig(format!("k={} with {} experts", self.k, self.n_experts)));
        }
        if !(self.gumbel_tau_min > 0.0 && self.gumbel_tau0 >= self.gumbel_tau_min) {
            return Err(MoaError::InvalidConfig("need tau0 >= tau_min > 0".into()));
        }
        if !(self.gumbel_decay > 0.0 && self.gumbel_decay <= 1.0) {
            return Err(MoaError::InvalidConfig("decay must lie in (0, 1]".into()));
        }
        if self.noise_scale.len() != self.n_experts {
            return Err(MoaError::BadLength { expected: self.n_experts, got: self.noise_scale.len() });
        }
        Ok(())
    }

    /// Temperature at a given step: `max(tau_min, tau0 * decay^step)`.
    pub fn tau_at(&self, step: u64) -> f64 {
        let exp = step.min(i32::MAX as u64) as i32;
        (self.gumbel_tau0 * self.gumbel_decay.powi(exp)).max(self.gumbel_tau_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterOutput {
    pub logits: Vec<f64>,
    /// One entry per expert; zero outside `selected`.
    pub gates: Vec<f64>,
    /// Selected expert indices in ascending order.
    pub selected: Vec<usize>,
    /// Train mode: the Gumbel-Softmax sample. Eval mode: `softmax(logits)`.
    pub probs_full: Vec<f64>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>, MoaError> {
    if !(tau > 0.0) {
        return Err(MoaError::NonPositiveTau(tau));
    }
    if noise.len() != logits.len() {
        return Err(MoaError::BadLength { expected: logits.len(), got: noise.len() });
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    Ok(softmax(&z))
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Indices of the `k` largest values, ties broken by the lower index, returned ascending.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

fn renormalize(probs: &[f64], selected: &[usize]) -> Vec<f64> {
    let total: f64 = selected.iter().map(|&i| probs[i]).sum();
    let mut gates = vec![0.0; probs.len()];
    if total > 0.0 {
        for &i in selected {
            gates[i] = probs[i] / total;
        }
    } else {
        // every selected probability underflowed: share equally
        for &i in selected {
            gates[i] = 1.0 / selected.len() as f64;
        }
    }
    gates
}

/// Routes one input. The random stream for train mode is derived from
/// `(cfg.seed, step)`, so repeated calls agree.
pub fn route(logits: &[f64], cfg: &RouterConfig, mode: RouteMode, step: u64) -> Result<RouterOutput, MoaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    route_with_rng(logits, cfg, mode, step, &mut rng)
}

/// [`route`] with a caller-supplied random stream.
pub fn route_with_rng<R: Rng + ?Sized>(
    logits: &[f64],
    cfg: &RouterConfig,
    mode: RouteMode,
    step: u64,
    rng: &mut R,
) -> Result<RouterOutput, MoaError> {
    cfg.validate()?;
    if logits.len() != cfg.n_experts {
        return Err(MoaError::BadLength { expected: cfg.n_experts, got: logits.len() });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MoaError::DimMismatch("logits must be finite".into()));
    }
    let probs_full = match mode {
        RouteMode::Eval => softmax(logits),
        RouteMode::Train => {
            let noisy: Vec<f64> = logits
                .iter()
                .zip(&cfg.noise_scale)
                .map(|(&l, &s)| {
                    let eps: f64 = StandardNormal.sample(rng);
                    l + eps * softplus(s)
                })
                .collect();
            let g = sample_gumbel(logits.len(), rng);
            gumbel_softmax(&noisy, cfg.tau_at(step), &g)?
        }
    };
    let selected = top_k(&probs_full, cfg.k);
    let gates = renormalize(&probs_full, &selected);
    Ok(RouterOutput { logits: logits.to_vec(), gates, selected, probs_full })
}
