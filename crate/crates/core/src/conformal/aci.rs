use serde::{Deserialize, Serialize};

pub const ALPHA_MIN: f64 = 0.001;
pub const ALPHA_MAX: f64 = 0.999;
pub const DEFAULT_GAMMA_ACI: f64 = 0.05;

/// Sign convention of the adaptive update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AciSign {
    /// `alpha + gamma (target - err)`: a miss lowers alpha and widens intervals.
    #[default]
    Standard,
    /// `alpha + gamma (err - target)`: the reversed variant, kept for comparison.
    Reversed,
}

/// One adaptive step, clamped to `[ALPHA_MIN, ALPHA_MAX]`.
pub fn aci_update(alpha_t: f64, miscovered: bool, gamma: f64, target: f64, sign: AciSign) -> f64 {
    let err = if miscovered { 1.0 } else { 0.0 };
    let delta = match sign {
        AciSign::Standard => target - err,
        AciSign::Reversed => err - target,
    };
    (alpha_t + gamma * delta).clamp(ALPHA_MIN, ALPHA_MAX)
}
