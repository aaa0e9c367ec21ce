use serde::{Deserialize, Serialize};

use crate::anomaly::fdr::{FdrProcedure, StepUpResult};
use crate::error::{Error, Result};
use crate::math::{ceil_tol, sort_f64};

pub const DEFAULT_RESIDUAL_EPS: f64 = 1e-6;
pub const DEFAULT_TRIM: f64 = 0.02;

/// `(y - mu) / (sigma + eps)`.
pub fn normalize_residuals(y: &[f64], mu: &[f64], sigma: &[f64], eps: f64) -> Result<Vec<f64>> {
    if mu.len() != y.len() {
        return Err(Error::dim("residual mu", y.len(), mu.len()));
    }
    if sigma.len() != y.len() {
        return Err(Error::dim("residual sigma", y.len(), sigma.len()));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("sigma must be nonnegative, got {s}")));
    }
    Ok(y.iter().zip(mu).zip(sigma).map(|((y, m), s)| (y - m) / (s + eps)).collect())
}

/// Calibration scores with the top `tau` fraction removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimmedCalibration {
    /// Retained scores, ascending.
    pub retained: Vec<f64>,
    pub tau: f64,
    pub original_len: usize,
    /// Scores at or above this value were dropped (`null` when nothing was).
    #[serde(with = "crate::io::inf_as_null")]
    pub threshold: f64,
    /// Trimming would have removed everything because all scores tie at the
    /// threshold, so the full set was kept.
    pub kept_all_ties: bool,
}

impl TrimmedCalibration {
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }
}

/// Drop every score `>= q`, where `q` is the `(ceil((1 - tau) n) + 1)`-th
/// smallest score, so that `ceil((1 - tau) n)` scores remain when there are
/// no ties at the cut.
pub fn trim_calibration(scores: &[f64], tau: f64) -> Result<TrimmedCalibration> {
    if scores.is_empty() {
        return Err(Error::InsufficientData("no calibration scores to trim".into()));
    }
    if !(0.0..0.5).contains(&tau) {
        return Err(Error::invalid(format!("trim fraction {tau} outside [0, 0.5)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("calibration scores contain NaN"));
    }
    let mut sorted = scores.to_vec();
    sort_f64(&mut sorted);
    let n = sorted.len();
    let keep = ceil_tol((1.0 - tau) * n as f64) as usize;
    if keep >= n {
        return Ok(TrimmedCalibration {
            retained: sorted,
            tau,
            original_len: n,
            threshold: f64::INFINITY,
            kept_all_ties: false,
        });
    }
    let threshold = sorted[keep];
    let cut = sorted.partition_point(|&s| s < threshold);
    if cut == 0 {
        log::warn!("all {n} calibration scores tie at the trim threshold {threshold}; keeping all");
        return Ok(TrimmedCalibration {
            retained: sorted,
            tau,
            original_len: n,
            threshold,
            kept_all_ties: true,
        });
    }
    sorted.truncate(cut);
    Ok(TrimmedCalibration {
        retained: sorted,
        tau,
        original_len: n,
        threshold,
        kept_all_ties: false,
    })
}

/// `(1 + #{retained >= s_test}) / (1 + n')`.
pub fn conformal_pvalue(trimmed: &TrimmedCalibration, s_test: f64) -> f64 {
    let n = trimmed.retained.len();
    let below = trimmed.retained.partition_point(|&s| s < s_test);
    (1 + n - below) as f64 / (1 + n) as f64
}

/// Per-node p-values at one time step and the resulting rejections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueField {
    pub pvalues: Vec<f64>,
    pub procedure: FdrProcedure,
    pub alpha: f64,
    pub rejected: Vec<bool>,
    pub k_star: usize,
    pub c_m: f64,
}

impl PValueField {
    pub fn new(pvalues: Vec<f64>, procedure: FdrProcedure, alpha: f64) -> Result<Self> {
        let StepUpResult { rejected, k_star, c_m } = procedure.apply(&pvalues, alpha)?;
        Ok(Self {
            pvalues,
            procedure,
            alpha,
            rejected,
            k_star,
            c_m,
        })
    }

    pub fn m(&self) -> usize {
        self.pvalues.len()
    }
}
