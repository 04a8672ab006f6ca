//! Learning with privileged time series: estimators that use intermediate
//! states `X₂..X_T`, available only at training time, to fit predictors of
//! a fixed-horizon outcome `Y` from the baseline state `X₁`.
//!
//! Modules:
//! - [`linalg`]: least squares, matrix chains, spectral radius.
//! - [`synth`]: Gaussian-linear system generation and trajectory sampling.
//! - [`estimators`]: baseline, recursive, stationary, distillation and
//!   composed estimators.
//! - [`metrics`]: parameter error, R², risk, gap and risk-expansion terms.
//! - [`dataio`]: CSV ingestion and train-only preprocessing.
//! - [`harness`]: seeded, config-driven experiment sweeps and result files.

pub mod dataio;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
pub use estimators::{
    fit_baseline, fit_composed, fit_distill_concat, fit_distill_seq, fit_lupts, fit_stat_lupts,
    ChainFit, ComposedPredictor, EstimatorSpec, FitOptions, FittedModel, LinearPredictor,
    Predictor, RegressorSpec,
};
pub use linalg::Matrix;
pub use synth::{RngStream, SystemParams, SystemSpec, TrajectoryDataset};
