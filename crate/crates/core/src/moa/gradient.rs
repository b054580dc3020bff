use super::MoaError;

/// Central-difference gradient `(f(p + h e_j) - f(p - h e_j)) / 2h`.
pub fn numeric_gradient<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>, MoaError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(MoaError::InvalidConfig(format!("step {h}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for j in 0..p.len() {
        probe[j] = p[j] + h;
        let up = f(&probe);
        probe[j] = p[j] - h;
        let down = f(&probe);
        probe[j] = p[j];
        if !up.is_finite() || !down.is_finite() {
            return Err(MoaError::NonFiniteEvaluation(j));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
