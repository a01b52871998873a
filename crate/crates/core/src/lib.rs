//! Minimum logarithmic super divergence (LSD) estimation and LSD-based tests
//! for discrete parametric models.
//!
//! The crate is organised bottom-up:
//!
//! - [`divergence`]: LSD and its relatives on finite discrete densities.
//! - [`models`]: geometric and Poisson families behind [`models::ModelFamily`].
//! - [`estimation`]: the minimum LSD objective, its gradient and the optimizer.
//! - [`asymptotics`]: sandwich matrices, the null quadratic form and
//!   chi-square mixture p-values.
//! - [`testing`]: one- and two-sample tests, power approximation and
//!   Monte Carlo harnesses.
//! - [`io`]: count tables, embedded datasets and grid reports.

// `!(x > 0.0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod divergence;
pub mod error;
pub mod estimation;
pub mod io;
pub mod models;
mod numeric;
pub mod testing;

pub use divergence::{derive_tuning, DiscreteDensity, TuningPair};
pub use error::{LsdError, Result};
pub use estimation::{minimize_lsd, EstimationResult, EstimatorConfig, FrequencyTable};
pub use models::{geometric_family, poisson_family, ModelFamily};
