use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sort_f64, std_normal_cdf, std_normal_quantile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitReport {
    pub pit: Vec<f64>,
    /// Kolmogorov-Smirnov distance from the uniform distribution on [0, 1].
    pub ks_statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub levels: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Mean absolute gap between empirical and nominal coverage.
    pub calibration_error: f64,
}

fn check_shapes(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<()> {
    if sigma.len() != mu.len() {
        return Err(Error::dim("sigma", mu.len(), sigma.len()));
    }
    if y.len() != mu.len() {
        return Err(Error::dim("truths", mu.len(), y.len()));
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("predictive sigma must be positive"));
    }
    Ok(())
}

/// One-sample KS distance between `values` and Uniform(0, 1).
pub fn ks_statistic_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    sort_f64(&mut v);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Probability integral transform under Gaussian predictive distributions.
pub fn pit_values(mu: &[f64], sigma: &[f64], y: &[f64]) -> Result<PitReport> {
    check_shapes(mu, sigma, y)?;
    let pit: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .zip(y)
        .map(|((m, s), y)| std_normal_cdf((y - m) / s))
        .collect();
    let ks_statistic = ks_statistic_uniform(&pit);
    Ok(PitReport { pit, ks_statistic })
}

/// Empirical coverage of central Gaussian intervals at each nominal level.
pub fn reliability_curve(mu: &[f64], sigma: &[f64], y: &[f64], levels: &[f64]) -> Result<ReliabilityReport> {
    check_shapes(mu, sigma, y)?;
    if let Some(bad) = levels.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::invalid(format!("nominal level {bad} outside (0, 1)")));
    }
    if mu.is_empty() {
        return Err(Error::InsufficientData("no predictions to evaluate".into()));
    }
    let n = mu.len() as f64;
    let empirical: Vec<f64> = levels
        .iter()
        .map(|&q| {
            let z = std_normal_quantile(0.5 + q / 2.0);
            let inside = mu
                .iter()
                .zip(sigma)
                .zip(y)
                .filter(|((m, s), y)| (*y - *m).abs() <= z * *s)
                .count();
            inside as f64 / n
        })
        .collect();
    let calibration_error = if levels.is_empty() {
        0.0
    } else {
        levels.iter().zip(&empirical).map(|(q, e)| (q - e).abs()).sum::<f64>() / levels.len() as f64
    };
    Ok(ReliabilityReport {
        levels: levels.to_vec(),
        empirical,
        calibration_error,
    })
}
