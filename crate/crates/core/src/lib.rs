//! Core algorithms for the ECG platform.
//!
//! The crate is organised along the processing chain a recording takes:
//!
//! ```text
//! bytes ──formats──▶ RawRecording ──signal::normalize──▶ StandardEcg (12 × 1000 @ 100 Hz, mV)
//!                                                          │
//!                         analysis (R-peaks, alignment, median beats)
//!                                                          │
//!                         finetune::embed ──▶ linear head training ──▶ metrics
//! ```
//!
//! `moa` holds the mixture-of-architectures routing mathematics and latent losses,
//! `synth` generates labelled synthetic ECGs for fixtures and benchmarks.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod finetune;
pub mod formats;
pub mod metrics;
pub mod moa;
pub mod signal;
pub mod synth;

pub use analysis::{AlignedEcg, AnalysisError, FiducialMap, MedianBeat};
pub use finetune::{FineTuneConfig, FineTuneError, LinearHead, TrainingReport};
pub use formats::{FormatError, SourceFormat};
pub use metrics::{AggregateStats, MetricsError};
pub use signal::{Lead, NormalizationOptions, RawRecording, SignalError, StandardEcg};
