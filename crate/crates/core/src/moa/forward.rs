use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{route, MoaError, RouteMode, RouterConfig, RouterOutput};

/// Width of the concatenated latent vector.
pub const LATENT_DIM: usize = 512;

/// A black-box expert mapping a `[channels × time]` feature matrix to a vector.
pub trait Expert: Send + Sync {
    fn output_dim(&self) -> usize;
    fn forward(&self, features: ArrayView2<'_, f64>) -> Vec<f64>;
}

/// Fixed affine map of per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExpert {
    /// `[out × 2·channels]`.
    pub weight: Array2<f64>,
    pub bias: Vec<f64>,
}

impl AffineExpert {
    pub fn seeded(channels: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 1.0 / (2.0 * channels as f64).sqrt()).expect("positive scale");
        let b = Normal::new(0.0, 0.1).expect("positive scale");
        AffineExpert {
            weight: Array2::from_shape_simple_fn((out_dim, 2 * channels), || w.sample(&mut rng)),
            bias: (0..out_dim).map(|_| b.sample(&mut rng)).collect(),
        }
    }
}

fn channel_summary(features: ArrayView2<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * features.nrows());
    for row in features.rows() {
        let n = row.len().max(1) as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        out.push(mean);
        out.push(var.sqrt());
    }
    out
}

impl Expert for AffineExpert {
    fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, features: ArrayView2<'_, f64>) -> Vec<f64> {
        let s = channel_summary(features);
        self.weight
            .rows()
            .into_iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(&s).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// One-dimensional convolution followed by global average pooling, one output
/// channel per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRouter {
    /// `[experts × channels × kernel]`.
    pub weights: Array3<f64>,
    pub bias: Vec<f64>,
}

impl ConvRouter {
    pub fn seeded(n_experts: usize, channels: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 1.0 / ((channels * kernel) as f64).sqrt()).expect("positive scale");
        ConvRouter {
            weights: Array3::from_shape_simple_fn((n_experts, channels, kernel), || w.sample(&mut rng)),
            bias: vec![0.0; n_experts],
        }
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>, MoaError> {
        let (experts, channels, kernel) = self.weights.dim();
        let (c, t) = features.dim();
        if c != channels || t < kernel {
            return Err(MoaError::DimMismatch(format!(
                "router expects {channels} channels and at least {kernel} steps, got {c}×{t}"
            )));
        }
        let positions = t - kernel + 1;
        // the pooled convolution equals the kernel applied to windowed channel sums
        let mut window_sums = Array2::<f64>::zeros((c, kernel));
        for ch in 0..c {
            let row = features.row(ch);
            for k in 0..kernel {
                window_sums[[ch, k]] = row.slice(ndarray::s![k..k + positions]).sum();
            }
        }
        Ok((0..experts)
            .map(|e| {
                let w = self.weights.index_axis(ndarray::Axis(0), e);
                (&w * &window_sums).sum() / positions as f64 + self.bias[e]
            })
            .collect())
    }
}

/// Concatenates gate-weighted expert outputs in ascending expert order.
pub fn combine_experts(outputs: &[Vec<f64>], gates: &[f64]) -> Result<Vec<f64>, MoaError> {
    if outputs.len() != gates.len() {
        return Err(MoaError::BadLength { expected: outputs.len(), got: gates.len() });
    }
    Ok(outputs.iter().zip(gates).flat_map(|(u, &g)| u.iter().map(move |v| g * v)).collect())
}

/// Routes `features` and builds the latent from the selected experts.
pub fn moa_forward(
    features: ArrayView2<'_, f64>,
    router: &ConvRouter,
    experts: &[&dyn Expert],
    cfg: &RouterConfig,
    mode: RouteMode,
    step: u64,
) -> Result<(Vec<f64>, RouterOutput), MoaError> {
    cfg.validate()?;
    if experts.len() != cfg.n_experts {
        return Err(MoaError::DimMismatch(format!("{} experts for n_experts={}", experts.len(), cfg.n_experts)));
    }
    if LATENT_DIM % cfg.k != 0 {
        return Err(MoaError::DimMismatch(format!("{LATENT_DIM} is not divisible by k={}", cfg.k)));
    }
    let part = LATENT_DIM / cfg.k;
    if let Some(bad) = experts.iter().position(|e| e.output_dim() != part) {
        return Err(MoaError::DimMismatch(format!("expert {bad} returns {} values, need {part}", experts[bad].output_dim())));
    }
    let out = route(&router.logits(features)?, cfg, mode, step)?;
    let outputs: Vec<Vec<f64>> = out.selected.iter().map(|&i| experts[i].forward(features)).collect();
    let gates: Vec<f64> = out.selected.iter().map(|&i| out.gates[i]).collect();
    let latent = combine_experts(&outputs, &gates)?;
    Ok((latent, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_weights_and_concatenates() {
        let u = vec![1.0, 2.0];
        let v = vec![3.0, 4.0];
        assert_eq!(combine_experts(&[u.clone(), v.clone()], &[0.8, 0.2]).unwrap(), vec![0.8, 1.6, 0.6000000000000001, 0.8]);
        assert_eq!(combine_experts(&[u, v], &[1.0, 0.0]).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_router_matches_direct_convolution() {
        let router = ConvRouter::seeded(3, 2, 4, 9);
        let x = Array2::from_shape_fn((2, 20), |(c, t)| ((c * 20 + t) as f64 * 0.7).cos());
        let fast = router.logits(x.view()).unwrap();
        for (e, &got) in fast.iter().enumerate() {
            let mut acc = 0.0;
            for t in 0..17 {
                for c in 0..2 {
                    for k in 0..4 {
                        acc += router.weights[[e, c, k]] * x[[c, t + k]];
                    }
                }
            }
            assert!((got - acc / 17.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = RouterConfig::default();
        let experts: Vec<AffineExpert> = (0..4).map(|i| AffineExpert::seeded(12, 256, i)).collect();
        let refs: Vec<&dyn Expert> = experts.iter().map(|e| e as &dyn Expert).collect();
        let router = ConvRouter::seeded(4, 12, 5, 1);
        let x = Array2::from_shape_fn((12, 100), |(c, t)| (c as f64 + t as f64 * 0.1).sin());
        let (latent, out) = moa_forward(x.view(), &router, &refs, &cfg, RouteMode::Eval, 0).unwrap();
        assert_eq!(latent.len(), LATENT_DIM);
        assert_eq!(out.selected.len(), 2);
        let bad: Vec<&dyn Expert> = refs[..3].to_vec();
        assert!(matches!(moa_forward(x.view(), &router, &bad, &cfg, RouteMode::Eval, 0), Err(MoaError::DimMismatch(_))));
    }
}
