//! Conformal anomaly detection with false-discovery-rate control.
//!
//! Residuals are normalised by the forecaster's uncertainty, scored by a
//! fitted density, and converted to conformal p-values against a trimmed
//! calibration set. Per time step the BH or BY step-up procedure selects
//! the flagged nodes; the block bootstrap audits how dependence between
//! p-values affects the realised FDR.

mod bootstrap;
mod fdr;
mod nullgen;
mod pvalue;
mod scorer;

pub use bootstrap::{
    block_bootstrap_verify, rho_block, BlockConfig, BlockReport, BootstrapConfig, DependenceReport,
    DEFAULT_BLOCK_GRID, DEFAULT_REPLICATES,
};
pub use fdr::{bh_procedure, by_procedure, empirical_fdr, FdrProcedure, StepUpResult};
pub use nullgen::{tune_dependence, DependentNullConfig, DependentNullGenerator, NullPanel};
pub use pvalue::{conformal_pvalue, normalize_residuals, trim_calibration, PValueField, TrimmedCalibration, DEFAULT_RESIDUAL_EPS, DEFAULT_TRIM};
pub use scorer::{fit_scorer, BandwidthRule, ScoreProvider, Scorer, ScorerKind, MIN_SCORER_SAMPLES};
