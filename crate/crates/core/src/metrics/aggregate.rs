use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::signal::quantile_sorted;

/// Location and spread of a list of scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub average: f64,
    pub median: f64,
    /// `Q(0.75) - Q(0.25)`, quantiles interpolated linearly at `q (n - 1)`.
    pub iqr: f64,
    /// Sample standard deviation (n - 1) over the mean.
    pub cv: f64,
}

pub fn aggregate(values: &[f64]) -> Result<AggregateStats, MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let average = values.iter().sum::<f64>() / n;
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let sd = (values.iter().map(|v| (v - average).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let cv = if sd == 0.0 {
        0.0
    } else if average == 0.0 {
        return Err(MetricsError::ZeroMean);
    } else {
        sd / average
    };
    Ok(AggregateStats { average, median, iqr, cv })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;

    #[test]
    fn baseline_column() {
        let s = aggregate(&[0.335, 0.371, 0.432, 0.753, 0.566, 0.730, 0.825, 0.739, 0.750]).unwrap();
        assert!((s.average - 0.611).abs() <= 0.0015);
        assert!((s.median - 0.730).abs() <= 0.0015);
        assert!((s.iqr - 0.318).abs() <= 0.0015);
        assert!((s.cv - 0.308).abs() <= 0.0015);
    }

    #[test]
    fn degenerate_inputs() {
        let s = aggregate(&[0.4; 5]).unwrap();
        assert_eq!((s.iqr, s.cv), (0.0, 0.0));
        assert_eq!(aggregate(&[1.0]), Err(MetricsError::TooFew { needed: 2, got: 1 }));
        assert_eq!(aggregate(&[-1.0, 1.0]), Err(MetricsError::ZeroMean));
        assert_eq!(aggregate(&[0.0, 0.0]).unwrap().cv, 0.0);
    }

    #[test]
    fn even_count_median() {
        assert_eq!(aggregate(&[4.0, 1.0, 3.0, 2.0]).unwrap().median, 2.5);
    }
}
