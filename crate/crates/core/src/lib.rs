//! Statistical-guarantee machinery for uncertainty-aware traffic control.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`forecaster`]: uncertainty-guided attention math, dual-stream
//!   decomposition, a heteroscedastic affine predictor and PIT/reliability
//!   diagnostics.
//! - [`conformal`]: spatially clustered split-conformal intervals with
//!   adaptive miscoverage tracking.
//! - [`anomaly`]: conformalized p-values with contamination trimming,
//!   BH/BY step-up procedures and block-bootstrap dependence audits.
//! - [`aggregate`]: grid-cell to intersection mapping with explicit
//!   covariance models and control-state assembly.
//! - [`control`]: constraints, ensemble world models, spectral-norm
//!   Lipschitz bounds, the model-error threshold and the Lyapunov filter.
//! - [`sim`]: a seeded grid-traffic simulator and the closed-loop runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod anomaly;
pub mod conformal;
pub mod control;
pub mod error;
pub mod forecaster;
pub mod io;
pub mod math;
pub mod sim;

pub use error::{Error, Result};
