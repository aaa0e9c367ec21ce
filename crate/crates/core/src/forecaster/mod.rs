//! Forecasting stage: attention math, temporal decomposition, the
//! heteroscedastic predictor used by the pipeline, and pre-conformal
//! calibration diagnostics.

mod attention;
mod diagnostics;
mod dual_stream;
pub(crate) mod graph;
mod het;

pub use attention::{
    attention_logit, attention_ratio_closed_form, layer_forward, pugat_attention,
    temp_scaled_attention, Activation, AttentionParams, LayerParams, NodeState,
};
pub use diagnostics::{ks_statistic_uniform, pit_values, reliability_curve, PitReport, ReliabilityReport};
pub use dual_stream::{combine_uncertainty, decompose_dual_stream, DualStreamParams};
pub use graph::GraphTopology;
pub use het::{fit_heteroscedastic, HetFit, HetFitConfig, HetPredictor, SIGMA_FLOOR};
