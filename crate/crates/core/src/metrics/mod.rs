//! Classification metrics, robustness statistics over per-task scores, and
//! label vocabulary mapping.

mod aggregate;
mod f1;
mod labels;

use thiserror::Error;

pub use aggregate::{aggregate, AggregateStats};
pub use f1::{evaluate_dataset, f1_scores, ClassScore, ConfusionCounts, EvaluationReport, F1Report};
pub use labels::{LabelMap, LabelMapSet, LabelRule, Vocab, BUILTIN_LABEL_MAPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("label `{0}` is not one of the classes")]
    UnknownClass(String),
    #[error("values have non-zero spread around a zero mean; CV is undefined")]
    ZeroMean,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("label map: {0}")]
    BadLabelMap(String),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::LengthMismatch(..) => "length_mismatch",
            MetricsError::TooFew { .. } => "too_few",
            MetricsError::UnknownClass(_) => "unknown_class",
            MetricsError::ZeroMean => "zero_mean",
            MetricsError::NonFinite => "non_finite",
            MetricsError::BadLabelMap(_) => "bad_label_map",
        }
    }
}
