//! Spatially clustered split-conformal calibration with adaptive
//! miscoverage tracking.

mod aci;
mod cluster;
mod intervals;
mod ledger;

pub use aci::{aci_update, AciSign, ALPHA_MAX, ALPHA_MIN, DEFAULT_GAMMA_ACI};
pub use cluster::{cluster_nodes, error_statistics, ClusterAssignment, DEFAULT_CLUSTERS};
pub use intervals::{
    build_intervals, coverage_efficiency, evaluate_coverage, write_intervals_csv, CoverageReport, ForecastBundle,
    PredictionIntervalSet,
};
pub use ledger::{
    cluster_quantile, conformity_scores, CalibrationLedger, ClusterCalibration, LedgerConfig,
    DEFAULT_TAU_GAP,
};
