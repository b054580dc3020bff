use serde::{Deserialize, Serialize};

use super::FineTuneError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One AdamW update with decoupled weight decay. `t` counts steps from 1.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamWParams,
    t: u64,
) -> Result<(), FineTuneError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(FineTuneError::ShapeMismatch(format!(
            "{} params, {} grads, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if t == 0 {
        return Err(FineTuneError::InvalidConfig("AdamW step counter starts at 1".into()));
    }
    let c1 = 1.0 - hp.beta1.powf(t as f64);
    let c2 = 1.0 - hp.beta2.powf(t as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.eps) + lr * hp.weight_decay * *p;
    }
    Ok(())
}

/// `lr0 · gamma^epoch`.
pub fn exponential_lr(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// Clamps every element to `[-limit, limit]`.
pub fn clip_by_value(grads: &mut [f64], limit: f64) {
    for g in grads {
        *g = g.clamp(-limit, limit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_step() {
        let mut p = [1.0];
        let mut s = AdamState::zeros(1);
        adamw_step(&mut p, &[1.0], &mut s, 0.1, &AdamWParams::default(), 1).unwrap();
        assert!((p[0] - 0.899).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn zero_gradient() {
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        let mut p = [0.3, -2.0];
        let mut s = AdamState::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &hp, 1).unwrap();
        assert_eq!(p, [0.3, -2.0]);

        let mut p = [0.5];
        let mut s = AdamState::zeros(1);
        adamw_step(&mut p, &[0.0], &mut s, 0.1, &AdamWParams::default(), 1).unwrap();
        assert_eq!(p[0], 0.5 - 0.1 * 0.01 * 0.5);
    }

    #[test]
    fn shape_checks() {
        let mut s = AdamState::zeros(2);
        assert!(matches!(
            adamw_step(&mut [0.0], &[0.0], &mut s, 0.1, &AdamWParams::default(), 1),
            Err(FineTuneError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn schedule() {
        assert_eq!(exponential_lr(1e-3, 0.9, 0), 1e-3);
        assert!((exponential_lr(1e-3, 0.9, 2) - 8.1e-4).abs() < 1e-18);
        assert!((exponential_lr(1e-3, 0.98, 1) - 9.8e-4).abs() < 1e-18);
    }
}
