//! # nbelnet
//!
//! Elastic-net regularized negative binomial (NB) regression in high
//! dimensions, together with a numerical toolkit that evaluates the
//! design constants and non-asymptotic error bounds attached to the
//! estimator (compatibility factor, weak cone invertibility factor,
//! Stabil constant, oracle bounds, signal-detection thresholds, grouping
//! bound) and a de-biased estimator with nodewise-regression standard
//! errors.
//!
//! The crate is organized around the regression core:
//!
//! * [`model`]: NB loss, score, Hessian, penalized objective and the
//!   symmetric Bregman divergence.
//! * [`solver`]: proximal-gradient fitting with KKT certification,
//!   warm-started regularization paths and a brute-force grid oracle.
//! * [`theory`]: cone constants and the error bounds built from them.
//! * [`selection`]: support/sign recovery, detection thresholds and
//!   design-condition diagnostics, plus replicated experiments.
//! * [`debias`]: nodewise approximate inverse Hessian, de-biased
//!   estimates and confidence intervals.
//! * [`simulate`]: design generation, NB sampling, the dispersion test
//!   and the seeded replication engine.
//!
//! All numerical code is generic over the scalar type through the
//! [`Real`] trait (implemented for `f32` and `f64`); the `*64` aliases
//! below fix the scalar to `f64`, which is what the command-line tool
//! and the test-suite use.

// Validation guards are written `!(x > 0)` rather than `x <= 0` so that
// NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod debias;
pub mod error;
pub mod model;
pub mod num;
pub mod selection;
pub mod simulate;
pub mod solver;
pub mod theory;

pub use error::{Error, Result};
pub use num::Real;

/// `f64` regression instance.
pub type Dataset64 = model::Dataset<f64>;
/// `f64` penalty pair.
pub type Penalty64 = model::Penalty<f64>;
/// `f64` solver configuration.
pub type SolverConfig64 = solver::SolverConfig<f64>;
/// `f64` fit result.
pub type Fit64 = solver::Fit<f64>;
/// `f64` cone specification.
pub type ConeSpec64 = theory::ConeSpec<f64>;
/// `f64` theory configuration.
pub type TheoryConfig64 = theory::TheoryConfig<f64>;
/// `f64` simulation specification.
pub type SimSpec64 = simulate::SimSpec<f64>;
