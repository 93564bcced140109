//! Sparse multivariate random-effects meta-analysis.
//!
//! When studies report estimates for many variates but the total number of
//! estimates is small (n < p² + p), conventional multivariate meta-analysis
//! models have more parameters than data. This crate fits a model that
//! approximates the combined within-study correlation and between-study
//! heterogeneity in a low-dimensional space reached through a random
//! projection, so the parameter count grows linearly in the number of
//! variates. Estimation is Bayesian, using a self-contained No-U-Turn
//! sampler; a per-variate REML random-effects analysis serves as the
//! comparator, and a simulation harness measures coverage, relative bias and
//! relative interval length of the two approaches.
//!
//! Module map:
//! - [`dataset`]: studies, datasets, indicator matrices, dataset CSV.
//! - [`transform`]: Fisher z transform, its inverse and standard error.
//! - [`params`]: parameter counting, the sparsity test, q selection.
//! - [`projection`]: random projection matrices and covariance lifting.
//! - [`model`]: the log-posterior and its analytic gradient.
//! - [`sampler`]: NUTS, split-R̂, posterior summaries, end-to-end fits.
//! - [`univariate`]: per-variate REML random-effects meta-analysis.
//! - [`simulator`]: synthetic meta-analysis datasets and calibration.
//! - [`metrics`]: coverage, relative bias/length, regressions, SUCRA.

pub mod dataset;
pub mod error;
mod linalg;
pub mod metrics;
pub mod model;
pub mod params;
pub mod projection;
pub mod sampler;
pub mod simulator;
pub mod transform;
pub mod univariate;

pub use error::{Error, Result};
