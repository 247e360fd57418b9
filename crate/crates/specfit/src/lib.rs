//! Distortion-robust spectral data fitting.
//!
//! Observed mixture spectra are modeled as weighted sums of known reference
//! spectra whose lines may be randomly shifted or compressed. This crate
//! estimates the mixing weights under those distortions:
//!
//! - [`estimators::ols_fit`] / [`estimators::gls_fit`] - plain least-squares
//!   baselines.
//! - [`estimators::agls_fit`] / [`estimators::agls_scale_fit`] - augmented
//!   least squares: the basis is extended with source derivatives, which
//!   absorb first-order shift (or compression) effects in one linear solve.
//! - [`estimators::agmle_hetero`] / [`estimators::agmle_ar1`] - iterative
//!   maximum-likelihood estimators that move the shift randomness into the
//!   observation covariance, for independent and AR(1)-correlated shifts.
//! - [`oracle::oracle_fit`] - exhaustive grid search over the exact
//!   nonlinear model, the ground-truth solver the linearizations are audited
//!   against.
//! - [`simulate`] - seeded synthetic data with known ground truth.
//!
//! The `specfit` binary exposes all of this as `simulate`, `fit`, `compare`
//! and `report` subcommands over CSV files; see the crate README.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod io;
pub mod numerics;
pub mod oracle;
pub mod report;
pub mod simulate;
pub mod spectra;

pub use error::{Error, Result};
