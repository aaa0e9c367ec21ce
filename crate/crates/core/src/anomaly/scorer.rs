use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{mean, quantile_sorted, sample_variance, sort_f64};

pub const MIN_SCORER_SAMPLES: usize = 30;
const GAUSSIAN_VARIANCE_FLOOR: f64 = 1e-12;
/// Kernel contributions beyond this many bandwidths are below 1e-14 of the peak.
const KERNEL_CUTOFF: f64 = 8.0;

/// Anomaly score of a normalised residual; higher means more anomalous.
pub trait Scorer {
    fn score(&self, z: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    GaussianNll,
    KernelDensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
    #[default]
    Silverman,
    Fixed(f64),
}

/// Negative log-density of a fitted one-dimensional model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreProvider {
    GaussianNll { mean: f64, variance: f64 },
    KernelDensity { sample: Vec<f64>, bandwidth: f64 },
}

impl ScoreProvider {
    pub fn kind(&self) -> ScorerKind {
        match self {
            ScoreProvider::GaussianNll { .. } => ScorerKind::GaussianNll,
            ScoreProvider::KernelDensity { .. } => ScorerKind::KernelDensity,
        }
    }

    /// Fitted density at `z` (for diagnostics).
    pub fn density(&self, z: f64) -> f64 {
        (-self.score(z)).exp()
    }
}

impl Scorer for ScoreProvider {
    fn score(&self, z: f64) -> f64 {
        match self {
            ScoreProvider::GaussianNll { mean, variance } => {
                0.5 * (2.0 * std::f64::consts::PI * variance).ln() + (z - mean).powi(2) / (2.0 * variance)
            }
            ScoreProvider::KernelDensity { sample, bandwidth } => kernel_nll(sample, *bandwidth, z),
        }
    }
}

fn kernel_nll(sorted: &[f64], h: f64, z: f64) -> f64 {
    let lo = sorted.partition_point(|&x| x < z - KERNEL_CUTOFF * h);
    let hi = sorted.partition_point(|&x| x <= z + KERNEL_CUTOFF * h);
    let exps: Vec<f64> = if lo < hi {
        sorted[lo..hi].iter().map(|x| -0.5 * ((z - x) / h).powi(2)).collect()
    } else {
        // Far tail: the nearest sample point dominates.
        let nearest = if lo == 0 {
            sorted[0]
        } else if lo >= sorted.len() {
            sorted[sorted.len() - 1]
        } else if (z - sorted[lo - 1]).abs() < (sorted[lo] - z).abs() {
            sorted[lo - 1]
        } else {
            sorted[lo]
        };
        vec![-0.5 * ((z - nearest) / h).powi(2)]
    };
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
    let norm = (sorted.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt()).ln();
    norm - lse
}

/// Fit a scorer on calibration residuals.
pub fn fit_scorer(sample: &[f64], kind: ScorerKind, bandwidth: BandwidthRule) -> Result<ScoreProvider> {
    if sample.len() < MIN_SCORER_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} calibration residuals, at least {MIN_SCORER_SAMPLES} required",
            sample.len()
        )));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("calibration residuals must be finite"));
    }
    let var = sample_variance(sample);
    match kind {
        ScorerKind::GaussianNll => Ok(ScoreProvider::GaussianNll {
            mean: mean(sample),
            variance: var.max(GAUSSIAN_VARIANCE_FLOOR),
        }),
        ScorerKind::KernelDensity => {
            if var <= 0.0 {
                return Err(Error::invalid("kernel density needs a sample with nonzero variance"));
            }
            let mut sorted = sample.to_vec();
            sort_f64(&mut sorted);
            let h = match bandwidth {
                BandwidthRule::Fixed(h) if h > 0.0 => h,
                BandwidthRule::Fixed(h) => return Err(Error::invalid(format!("bandwidth {h} must be positive"))),
                BandwidthRule::Silverman => {
                    let sd = var.sqrt();
                    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
                    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
                    0.9 * spread * (sorted.len() as f64).powf(-0.2)
                }
            };
            Ok(ScoreProvider::KernelDensity { sample: sorted, bandwidth: h })
        }
    }
}
