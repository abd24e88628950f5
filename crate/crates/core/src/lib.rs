//! Self-distillation prototype training with dimension regularization, cohort
//! score normalization and speaker-verification metrics.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices, normalized covariance, softmax, finite differences
//! * [`losses`]: training objectives with analytic gradients
//! * [`model`]: toy teacher–student network and prototype bank
//! * [`data`]: synthetic corpora, crops, masking and feature files
//! * [`trainer`]: SGD training loop, schedules, diagnostics, checkpoints
//! * [`scoring`]: cosine scoring and Z/T/S/AS score normalization
//! * [`metrics`]: DET sweep, EER and minDCF
//! * [`oracle`]: property and oracle suite shared by tests and the CLI

pub mod error;
pub mod numerics;
pub mod losses;
pub mod model;
pub mod data;
pub mod trainer;
pub mod scoring;
pub mod metrics;
pub mod oracle;

pub use error::{Error, Result};
pub use numerics::{CovarianceMatrix, RealMatrix};
