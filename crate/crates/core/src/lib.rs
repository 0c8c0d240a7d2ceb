//! Stochastic gradient Langevin dynamics with data-dependent priors.
//!
//! The crate trains small models with SGLD and full-batch Langevin dynamics,
//! tracks the gradient incoherence `ξ_t` of a held-in forecast prior at every
//! step, and turns the accumulated KL divergences into Monte-Carlo estimates of
//! expected-generalization-error bounds. Gradient-norm and Lipschitz baselines
//! are computed from the same trajectories so comparisons share random numbers.
//!
//! Module map:
//!
//! * [`numerics`]: counter-based RNG streams, dense vectors, Gaussian KL.
//! * [`data_io`]: synthetic generators, IDX ingestion, holdout splits.
//! * [`models`]: linear / softmax / MLP predictors with analytic gradients.
//! * [`subset_stats`]: exact finite-population formulas and enumeration oracles.
//! * [`dynamics`]: schedules and the SGLD / LD trajectory simulator.
//! * [`incoherence`]: prior forecast, `ξ_t`, KL ledger.
//! * [`bounds`]: nested Monte-Carlo bound estimators and baselines.
//! * [`analytic`]: closed forms for Langevin mean estimation with squared loss.
//! * [`report`]: 17-significant-digit JSON and CSV number formatting.
//! * [`cli`]: JSON-configured experiment harness behind the `genbound` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod bounds;
pub mod cli;
pub mod data_io;
pub mod dynamics;
pub mod error;
pub mod incoherence;
pub mod models;
pub mod numerics;
pub mod report;
pub mod subset_stats;

pub use error::{Error, Result};
