use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::harmonic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrProcedure {
    /// Benjamini-Hochberg: valid under independence or PRDS.
    Bh,
    /// Benjamini-Yekutieli: valid under arbitrary dependence.
    #[default]
    By,
}

impl FdrProcedure {
    pub fn apply(self, pvalues: &[f64], alpha: f64) -> Result<StepUpResult> {
        match self {
            FdrProcedure::Bh => bh_procedure(pvalues, alpha),
            FdrProcedure::By => by_procedure(pvalues, alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepUpResult {
    /// Rejection mask in input order.
    pub rejected: Vec<bool>,
    pub k_star: usize,
    /// Dependence correction (1 for BH, the harmonic number for BY).
    pub c_m: f64,
}

fn step_up(pvalues: &[f64], alpha: f64, c_m: f64) -> Result<StepUpResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("FDR level {alpha} outside (0, 1)")));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let scale = alpha / (m as f64 * c_m);
    let k_star = (1..=m)
        .rev()
        .find(|&k| pvalues[order[k - 1]] <= k as f64 * scale)
        .unwrap_or(0);
    let mut rejected = vec![false; m];
    for &i in &order[..k_star] {
        rejected[i] = true;
    }
    Ok(StepUpResult { rejected, k_star, c_m })
}

/// Reject the `k*` smallest p-values, `k* = max{k : p_(k) <= k alpha / m}`.
pub fn bh_procedure(pvalues: &[f64], alpha: f64) -> Result<StepUpResult> {
    step_up(pvalues, alpha, 1.0)
}

/// BH with thresholds divided by `c_m = sum_{i=1}^m 1/i`.
pub fn by_procedure(pvalues: &[f64], alpha: f64) -> Result<StepUpResult> {
    step_up(pvalues, alpha, harmonic(pvalues.len()).max(1.0))
}

/// Realised false discovery proportion (with the `max(R, 1)` guard) and power.
pub fn empirical_fdr(rejected: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if rejected.len() != truth.len() {
        return Err(Error::dim("ground-truth mask", rejected.len(), truth.len()));
    }
    let mut rejections = 0usize;
    let mut false_rej = 0usize;
    let mut true_rej = 0usize;
    for (&r, &t) in rejected.iter().zip(truth) {
        if r {
            rejections += 1;
            if t {
                true_rej += 1;
            } else {
                false_rej += 1;
            }
        }
    }
    let anomalies = truth.iter().filter(|&&t| t).count();
    let fdr = false_rej as f64 / rejections.max(1) as f64;
    let power = if anomalies == 0 {
        0.0
    } else {
        true_rej as f64 / anomalies as f64
    };
    Ok((fdr, power))
}
