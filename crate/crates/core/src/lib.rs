//! Recovering latent confounders from noisy, partially observed covariates by
//! exponential-family low-rank matrix completion, and estimating average
//! treatment effects with the recovered confounders.
//!
//! The crate is organised bottom-up:
//!
//! * [`mf`]: observed-matrix data model and exponential-family losses;
//! * [`solver`]: convex and factored completion solvers, confounder
//!   extraction and cross-validation;
//! * [`diagnostics`]: subspace distances and matrix conditioning quantities;
//! * [`estimators`]: ATE estimators (regression, weighting, doubly robust,
//!   matching) and the large-sample bias formula for noisy covariates;
//! * [`synth`]: synthetic and semi-synthetic data generators;
//! * [`ingest`]: CSV/JSON I/O and baseline imputation;
//! * [`harness`]: seeded Monte Carlo experiment runner.

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod ingest;
pub mod linalg;
pub mod mf;
pub mod rng;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use mf::{Entry, FactorPair, LossKind, NaturalParamMatrix, ObservedMatrix};
