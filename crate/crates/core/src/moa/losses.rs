use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::MoaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoaLosses {
    pub load_balance: f64,
    pub route_entropy: f64,
    pub mmd: f64,
    pub reconstruction_mse: f64,
}

fn check_batch(probs: ArrayView2<'_, f64>) -> Result<(), MoaError> {
    if probs.nrows() == 0 || probs.ncols() == 0 {
        return Err(MoaError::EmptyBatch);
    }
    Ok(())
}

fn selection_fractions(n_experts: usize, selected: &[Vec<usize>]) -> Result<Vec<f64>, MoaError> {
    let mut counts = vec![0.0; n_experts];
    let mut slots = 0usize;
    for sel in selected {
        for &i in sel {
            if i >= n_experts {
                return Err(MoaError::DimMismatch(format!("expert index {i} of {n_experts}")));
            }
            counts[i] += 1.0;
            slots += 1;
        }
    }
    if slots == 0 {
        return Err(MoaError::EmptyBatch);
    }
    Ok(counts.into_iter().map(|c| c / slots as f64).collect())
}

/// `N * sum_i f_i * P_i`: `f_i` is the share of selection slots that went to
/// expert `i`, `P_i` its mean routing probability.
pub fn load_balance_loss(batch_probs: ArrayView2<'_, f64>, batch_selected: &[Vec<usize>]) -> Result<f64, MoaError> {
    check_batch(batch_probs)?;
    let (b, n) = batch_probs.dim();
    if batch_selected.len() != b {
        return Err(MoaError::BadLength { expected: b, got: batch_selected.len() });
    }
    let f = selection_fractions(n, batch_selected)?;
    let p = batch_probs.mean_axis(ndarray::Axis(0)).expect("non-empty batch");
    Ok(n as f64 * f.iter().zip(p.iter()).map(|(a, b)| a * b).sum::<f64>())
}

/// Gradient of [`load_balance_loss`] with respect to the router logits, where
/// each probability row is `softmax(logits row)` and selections are held fixed.
pub fn load_balance_grad(logits: ArrayView2<'_, f64>, batch_selected: &[Vec<usize>]) -> Result<Array2<f64>, MoaError> {
    check_batch(logits)?;
    let (b, n) = logits.dim();
    let f = selection_fractions(n, batch_selected)?;
    let mut grad = Array2::zeros((b, n));
    for (row, mut g) in logits.rows().into_iter().zip(grad.rows_mut()) {
        let p = super::softmax(&row.to_vec());
        let fp: f64 = f.iter().zip(&p).map(|(a, b)| a * b).sum();
        for j in 0..n {
            g[j] = n as f64 / b as f64 * p[j] * (f[j] - fp);
        }
    }
    Ok(grad)
}

fn mean_probs(batch_probs: ArrayView2<'_, f64>) -> Vec<f64> {
    batch_probs.mean_axis(ndarray::Axis(0)).expect("non-empty batch").to_vec()
}

/// `ln N - H(mean routing distribution)`, zero when routing is balanced on average.
pub fn route_entropy_loss(batch_probs: ArrayView2<'_, f64>) -> Result<f64, MoaError> {
    check_batch(batch_probs)?;
    let n = batch_probs.ncols();
    let entropy: f64 = mean_probs(batch_probs).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((n as f64).ln() - entropy)
}

/// Gradient of [`route_entropy_loss`] with respect to softmax logits.
pub fn route_entropy_grad(logits: ArrayView2<'_, f64>) -> Result<Array2<f64>, MoaError> {
    check_batch(logits)?;
    let (b, n) = logits.dim();
    let probs: Vec<Vec<f64>> = logits.rows().into_iter().map(|r| super::softmax(&r.to_vec())).collect();
    let mut pbar = vec![0.0; n];
    for p in &probs {
        for (acc, v) in pbar.iter_mut().zip(p) {
            *acc += v / b as f64;
        }
    }
    let log_pbar: Vec<f64> = pbar.iter().map(|p| p.ln()).collect();
    let mut grad = Array2::zeros((b, n));
    for (p, mut g) in probs.iter().zip(grad.rows_mut()) {
        let expected: f64 = p.iter().zip(&log_pbar).map(|(a, l)| a * l).sum();
        for j in 0..n {
            g[j] = p[j] * (log_pbar[j] - expected) / b as f64;
        }
    }
    Ok(grad)
}

pub fn rbf_kernel(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn mean_kernel(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigma: f64) -> f64 {
    let mut total = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            total += rbf_kernel(a, b, sigma);
        }
    }
    total / (x.nrows() * y.nrows()) as f64
}

fn check_mmd(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigma: f64) -> Result<(), MoaError> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(MoaError::EmptyBatch);
    }
    if x.ncols() != y.ncols() {
        return Err(MoaError::DimMismatch(format!("{} vs {} columns", x.ncols(), y.ncols())));
    }
    if !(sigma > 0.0) {
        return Err(MoaError::InvalidConfig(format!("bandwidth {sigma}")));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD with an RBF kernel.
pub fn mmd_loss(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigma: f64) -> Result<f64, MoaError> {
    check_mmd(x, y, sigma)?;
    Ok(mean_kernel(x, x, sigma) + mean_kernel(y, y, sigma) - 2.0 * mean_kernel(x, y, sigma))
}

/// Gradient of [`mmd_loss`] with respect to every coordinate of `x`.
pub fn mmd_grad_x(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigma: f64) -> Result<Array2<f64>, MoaError> {
    check_mmd(x, y, sigma)?;
    let (n, m) = (x.nrows() as f64, y.nrows() as f64);
    let s2 = sigma * sigma;
    let mut grad = Array2::zeros(x.dim());
    for (a, mut g) in x.rows().into_iter().zip(grad.rows_mut()) {
        for other in x.rows() {
            let k = rbf_kernel(a, other, sigma);
            for d in 0..g.len() {
                g[d] += -2.0 / (n * n) * k * (a[d] - other[d]) / s2;
            }
        }
        for other in y.rows() {
            let k = rbf_kernel(a, other, sigma);
            for d in 0..g.len() {
                g[d] += 2.0 / (n * m) * k * (a[d] - other[d]) / s2;
            }
        }
    }
    Ok(grad)
}

/// Median of the pairwise distances over the pooled samples.
pub fn median_bandwidth(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> f64 {
    let pooled: Vec<ArrayView1<'_, f64>> = x.rows().into_iter().chain(y.rows()).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let d2: f64 = pooled[i].iter().zip(pooled[j].iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(d2.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let m = crate::signal::median_in_place(&mut d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}
