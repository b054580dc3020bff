use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FineTuneError;

/// Output nonlinearity: softmax for single-label data, one sigmoid per class for
/// multi-label data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softmax,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Softmax => "softmax",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply(self, logits: &[f64]) -> Vec<f64> {
        match self {
            Activation::Softmax => crate::moa::softmax(logits),
            Activation::Sigmoid => logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Linear,
    Mlp { hidden: usize },
}

/// `act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `[n_classes × d]`.
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
    pub class_names: Vec<String>,
    pub activation: Activation,
}

impl LinearHead {
    pub fn new(weights: Array2<f64>, bias: Vec<f64>, class_names: Vec<String>, activation: Activation) -> Result<Self, FineTuneError> {
        let head = LinearHead { weights, bias, class_names, activation };
        check_output(&head.class_names, head.weights.nrows(), head.bias.len())?;
        check_finite(head.weights.iter().chain(&head.bias))?;
        Ok(head)
    }

    pub fn zeros(input_dim: usize, class_names: Vec<String>, activation: Activation) -> Self {
        let c = class_names.len();
        LinearHead { weights: Array2::zeros((c, input_dim)), bias: vec![0.0; c], class_names, activation }
    }
}

/// One ReLU hidden layer: `act(W2 relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    /// `[hidden × d]`.
    pub w1: Array2<f64>,
    pub b1: Vec<f64>,
    /// `[n_classes × hidden]`.
    pub w2: Array2<f64>,
    pub b2: Vec<f64>,
    pub class_names: Vec<String>,
    pub activation: Activation,
}

impl MlpHead {
    pub fn new(
        w1: Array2<f64>,
        b1: Vec<f64>,
        w2: Array2<f64>,
        b2: Vec<f64>,
        class_names: Vec<String>,
        activation: Activation,
    ) -> Result<Self, FineTuneError> {
        if w1.nrows() != b1.len() || w2.ncols() != w1.nrows() {
            return Err(FineTuneError::ShapeMismatch(format!(
                "hidden layer {}×{}, bias {}, output layer {}×{}",
                w1.nrows(),
                w1.ncols(),
                b1.len(),
                w2.nrows(),
                w2.ncols()
            )));
        }
        let head = MlpHead { w1, b1, w2, b2, class_names, activation };
        check_output(&head.class_names, head.w2.nrows(), head.b2.len())?;
        check_finite(head.w1.iter().chain(&head.b1).chain(head.w2.iter()).chain(&head.b2))?;
        Ok(head)
    }
}

fn check_output(names: &[String], rows: usize, bias: usize) -> Result<(), FineTuneError> {
    if names.len() < 2 {
        return Err(FineTuneError::TooFewClasses(names.len()));
    }
    if rows != names.len() || bias != names.len() {
        return Err(FineTuneError::ShapeMismatch(format!("{} classes, {rows} weight rows, {bias} biases", names.len())));
    }
    Ok(())
}

fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> Result<(), FineTuneError> {
    if values.any(|v| !v.is_finite()) {
        return Err(FineTuneError::ShapeMismatch("non-finite parameter".into()));
    }
    Ok(())
}

/// A trainable classification head. Parameters flatten row-major in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Linear(LinearHead),
    Mlp(MlpHead),
}

impl From<LinearHead> for Head {
    fn from(h: LinearHead) -> Self {
        Head::Linear(h)
    }
}

impl From<MlpHead> for Head {
    fn from(h: MlpHead) -> Self {
        Head::Mlp(h)
    }
}

impl Head {
    /// Seeded initialisation: small Gaussian weights, zero biases.
    pub fn init<R: Rng + ?Sized>(kind: HeadKind, input_dim: usize, class_names: Vec<String>, activation: Activation, rng: &mut R) -> Self {
        let c = class_names.len();
        let mut gauss = |rows: usize, cols: usize, sd: f64| {
            let dist = Normal::new(0.0, sd).expect("positive scale");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
        };
        match kind {
            HeadKind::Linear => Head::Linear(LinearHead {
                weights: gauss(c, input_dim, 0.01),
                bias: vec![0.0; c],
                class_names,
                activation,
            }),
            HeadKind::Mlp { hidden } => Head::Mlp(MlpHead {
                w1: gauss(hidden, input_dim, (2.0 / input_dim.max(1) as f64).sqrt()),
                b1: vec![0.0; hidden],
                w2: gauss(c, hidden, (1.0 / hidden.max(1) as f64).sqrt()),
                b2: vec![0.0; c],
                class_names,
                activation,
            }),
        }
    }

    /// Name used in model manifests.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Head::Linear(_) => "linear_head",
            Head::Mlp(_) => "mlp",
        }
    }

    pub fn class_names(&self) -> &[String] {
        match self {
            Head::Linear(h) => &h.class_names,
            Head::Mlp(h) => &h.class_names,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names().len()
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Linear(h) => h.weights.ncols(),
            Head::Mlp(h) => h.w1.ncols(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Head::Linear(h) => h.activation,
            Head::Mlp(h) => h.activation,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Head::Linear(h) => h.weights.len() + h.bias.len(),
            Head::Mlp(h) => h.w1.len() + h.b1.len() + h.w2.len() + h.b2.len(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Head::Linear(h) => h.weights.iter().chain(&h.bias).copied().collect(),
            Head::Mlp(h) => h.w1.iter().chain(&h.b1).chain(h.w2.iter()).chain(&h.b2).copied().collect(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), FineTuneError> {
        if p.len() != self.n_params() {
            return Err(FineTuneError::ShapeMismatch(format!("{} parameters for a head with {}", p.len(), self.n_params())));
        }
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| dst.for_each(|d| *d = it.next().expect("length checked"));
        match self {
            Head::Linear(h) => {
                fill(&mut h.weights.iter_mut());
                fill(&mut h.bias.iter_mut());
            }
            Head::Mlp(h) => {
                fill(&mut h.w1.iter_mut());
                fill(&mut h.b1.iter_mut());
                fill(&mut h.w2.iter_mut());
                fill(&mut h.b2.iter_mut());
            }
        }
        Ok(())
    }

    fn hidden(h: &MlpHead, x: &[f64]) -> Vec<f64> {
        h.w1.rows().into_iter().zip(&h.b1).map(|(r, b)| (dot(r.iter(), x) + b).max(0.0)).collect()
    }

    /// Pre-activation outputs; `x.len()` must equal `input_dim`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Head::Linear(h) => h.weights.rows().into_iter().zip(&h.bias).map(|(r, b)| dot(r.iter(), x) + b).collect(),
            Head::Mlp(h) => {
                let z = Self::hidden(h, x);
                h.w2.rows().into_iter().zip(&h.b2).map(|(r, b)| dot(r.iter(), &z) + b).collect()
            }
        }
    }

    /// Adds `d loss / d params` for one sample given `d loss / d logits`.
    pub fn accumulate_grad(&self, x: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        match self {
            Head::Linear(h) => {
                let (c, d) = h.weights.dim();
                for (k, &g) in dlogits.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (dst, &xi) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *dst += g * xi;
                    }
                    grad[c * d + k] += g;
                }
            }
            Head::Mlp(h) => {
                let (hid, d) = h.w1.dim();
                let c = h.w2.nrows();
                let z = Self::hidden(h, x);
                let o_w2 = hid * d + hid;
                let o_b2 = o_w2 + c * hid;
                let mut dz = vec![0.0; hid];
                for (k, &g) in dlogits.iter().enumerate() {
                    for j in 0..hid {
                        grad[o_w2 + k * hid + j] += g * z[j];
                        dz[j] += g * h.w2[[k, j]];
                    }
                    grad[o_b2 + k] += g;
                }
                for j in 0..hid {
                    if z[j] <= 0.0 {
                        continue;
                    }
                    for (dst, &xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *dst += dz[j] * xi;
                    }
                    grad[hid * d + j] += dz[j];
                }
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        self.activation().apply(&self.logits(x))
    }
}

fn dot<'a>(w: impl Iterator<Item = &'a f64>, x: &[f64]) -> f64 {
    w.zip(x).map(|(a, b)| a * b).sum()
}

/// Class probabilities for every embedding row.
pub fn predict(head: &Head, embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, FineTuneError> {
    let d = head.input_dim();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(FineTuneError::ShapeMismatch(format!("embedding of length {}, head expects {d}", bad.len())));
    }
    Ok(embeddings.iter().map(|e| head.predict_row(e)).collect())
}
