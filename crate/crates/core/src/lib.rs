//! Posterior estimation of the contamination factor of an unlabeled dataset.
//!
//! The pipeline maps rows into a score space built from several anomaly
//! detectors, fits a truncated Dirichlet-process Gaussian mixture there by
//! variational inference, ranks the mixture components by anomalousness and
//! turns the chained per-component anomaly probabilities into a sample set
//! from the posterior of the contamination factor.
//!
//! Classical threshold estimators and evaluation metrics are included for
//! benchmarking.

pub mod detectors;
pub mod dpgmm;
pub mod error;
pub mod eval;
pub mod gammapost;
pub mod num;
pub mod scorespace;
pub mod seed;
pub mod synth;
pub mod thresholds;

pub use error::{Error, Result};
pub use num::Real;

pub use dpgmm::{DpgmmConfig, MixturePosterior};
pub use eval::EvalReport;
pub use gammapost::{estimate, CalibrationTargets, EstimatorConfig, GammaPosterior, SigmoidParams};
pub use thresholds::{Method, ThresholdEstimate};

/// Double-precision score matrix.
pub type ScoreMatrix = scorespace::ScoreMatrix<f64>;
/// Single-precision score matrix.
pub type ScoreMatrix32 = scorespace::ScoreMatrix<f32>;
/// Double-precision dataset.
pub type RawDataset = scorespace::RawDataset<f64>;
/// Single-precision dataset.
pub type RawDataset32 = scorespace::RawDataset<f32>;
