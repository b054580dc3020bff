use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::MoaError;

/// Time absolute position encoding `[L × d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeEncoding {
    pub values: Array2<f64>,
}

impl TapeEncoding {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Sinusoidal encoding with frequencies `10000^(-2i/d)` scaled by `d / L`, so
/// the frequency spread adapts to the sequence length.
pub fn tape_encoding(len: usize, dim: usize) -> Result<TapeEncoding, MoaError> {
    if dim % 2 == 1 || dim == 0 {
        return Err(MoaError::OddDim(dim));
    }
    if len == 0 {
        return Err(MoaError::DimMismatch("sequence length must be at least 1".into()));
    }
    let scale = dim as f64 / len as f64;
    let values = Array2::from_shape_fn((len, dim), |(pos, j)| {
        let i = j / 2;
        let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let angle = pos as f64 * omega * scale;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    });
    Ok(TapeEncoding { values })
}
