use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationMode {
    /// With probability `eps(s)` replace the action by a uniform draw.
    #[default]
    SigmoidProbability,
    /// Add Gaussian noise with scale `beta_explore * sigma_bar`.
    GaussianNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationParams {
    /// Weights on `[sigma_forecast, p_anom, sigma_W]`.
    pub weights: [f64; 3],
    pub bias: f64,
    pub beta_explore: f64,
    pub mode: ExplorationMode,
}

impl Default for ExplorationParams {
    fn default() -> Self {
        Self {
            weights: [0.5, -0.5, 1.0],
            bias: -3.0,
            beta_explore: 0.1,
            mode: ExplorationMode::SigmoidProbability,
        }
    }
}

/// `sigmoid(w . [sigma_forecast, p_anom, sigma_W] + b)`.
pub fn exploration_prob(sigma_forecast: f64, p_anom: f64, sigma_w: f64, params: &ExplorationParams) -> f64 {
    let [a, b, c] = params.weights;
    sigmoid(a * sigma_forecast + b * p_anom + c * sigma_w + params.bias)
}

/// Standard deviation of the additive exploration noise.
pub fn exploration_noise_scale(sigma_bar: f64, params: &ExplorationParams) -> f64 {
    params.beta_explore * sigma_bar.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lambda_p: f64,
    pub lambda_sigma: f64,
    pub lambda_c: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_sigma: 0.5,
            lambda_c: 1.0,
        }
    }
}

/// `r_traffic + lambda_p (p_after - p_before) - lambda_sigma sigma_bar - lambda_C d_C`.
pub fn anomaly_reward(r_traffic: f64, p_before: f64, p_after: f64, sigma_bar: f64, d_c: f64, w: &RewardWeights) -> Result<f64> {
    if [w.lambda_p, w.lambda_sigma, w.lambda_c].iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("reward weights must be nonnegative"));
    }
    Ok(r_traffic + w.lambda_p * (p_after - p_before) - w.lambda_sigma * sigma_bar - w.lambda_c * d_c)
}
