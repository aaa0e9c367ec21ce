use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax;

/// Learnable moving-average window plus trend/residual correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualStreamParams {
    pub half_width: usize,
    /// Raw window logits, length `2 * half_width + 1`.
    pub window_logits: Vec<f64>,
    pub correlation_raw: f64,
}

impl DualStreamParams {
    pub fn new(half_width: usize, window_logits: Vec<f64>, correlation_raw: f64) -> Result<Self> {
        if window_logits.len() != 2 * half_width + 1 {
            return Err(Error::dim("window logits", 2 * half_width + 1, window_logits.len()));
        }
        if window_logits.iter().any(|v| !v.is_finite()) || !correlation_raw.is_finite() {
            return Err(Error::invalid("dual-stream parameters must be finite"));
        }
        Ok(Self {
            half_width,
            window_logits,
            correlation_raw,
        })
    }

    /// Uniform window (all logits zero) and zero correlation.
    pub fn uniform(half_width: usize) -> Self {
        Self {
            half_width,
            window_logits: vec![0.0; 2 * half_width + 1],
            correlation_raw: 0.0,
        }
    }

    /// Softmax-normalised window weights, indexed from offset `-w` to `+w`.
    pub fn window_weights(&self) -> Vec<f64> {
        softmax(&self.window_logits)
    }

    /// `rho = tanh(correlation_raw)`.
    pub fn correlation(&self) -> f64 {
        self.correlation_raw.tanh()
    }
}

fn reflect(idx: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = idx;
    // A single reflection suffices because the window never exceeds the series.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Split a series into a weighted moving-average trend and the residual.
///
/// The window is applied to a reflect-padded copy so the output has the input
/// length; `trend + residual` reproduces the input at every index.
pub fn decompose_dual_stream(series: &[f64], params: &DualStreamParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = params.half_width;
    let window = 2 * w + 1;
    if series.len() < window {
        return Err(Error::InsufficientData(format!(
            "series of length {} is shorter than the moving-average window {window}",
            series.len()
        )));
    }
    let weights = params.window_weights();
    let n = series.len();
    let mut trend = Vec::with_capacity(n);
    for t in 0..n {
        let mut acc = 0.0;
        for (k, &a) in weights.iter().enumerate() {
            let offset = k as isize - w as isize;
            acc += a * series[reflect(t as isize + offset, n)];
        }
        trend.push(acc);
    }
    let residual = series.iter().zip(&trend).map(|(x, tr)| x - tr).collect();
    Ok((trend, residual))
}

/// `sqrt(sigma_trend^2 + sigma_res^2 + 2 rho sigma_trend sigma_res)`.
pub fn combine_uncertainty(sigma_trend: f64, sigma_res: f64, rho: f64) -> Result<f64> {
    if !(sigma_trend > 0.0 && sigma_trend.is_finite() && sigma_res > 0.0 && sigma_res.is_finite()) {
        return Err(Error::invalid(format!(
            "stream uncertainties must be positive and finite, got {sigma_trend} and {sigma_res}"
        )));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("correlation {rho} outside [-1, 1]")));
    }
    let var = sigma_trend * sigma_trend + sigma_res * sigma_res + 2.0 * rho * sigma_trend * sigma_res;
    Ok(var.max(0.0).sqrt())
}
