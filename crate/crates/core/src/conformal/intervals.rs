use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::ledger::CalibrationLedger;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv_rows};

/// Point forecasts and uncertainties indexed `[node][horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl ForecastBundle {
    pub fn new(mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dim("forecast sigma nodes", mu.len(), sigma.len()));
        }
        for (m, s) in mu.iter().zip(&sigma) {
            if m.len() != s.len() {
                return Err(Error::dim("forecast horizons", m.len(), s.len()));
            }
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("forecast sigma must be positive"));
            }
        }
        Ok(Self { mu, sigma })
    }

    /// Single-horizon bundle.
    pub fn one_step(mu: &[f64], sigma: &[f64]) -> Result<Self> {
        Self::new(mu.iter().map(|&m| vec![m]).collect(), sigma.iter().map(|&s| vec![s]).collect())
    }

    pub fn node_count(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIntervalSet {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    /// Set where the cluster quantile is the unbounded sentinel.
    pub unbounded: Vec<Vec<bool>>,
    pub nominal_level: f64,
}

impl PredictionIntervalSet {
    pub fn contains(&self, node: usize, horizon: usize, y: f64) -> bool {
        self.lower[node][horizon] <= y && y <= self.upper[node][horizon]
    }
}

/// `[mu - q_k sigma, mu + q_k sigma]` using each node's cluster quantile.
pub fn build_intervals(bundle: &ForecastBundle, ledger: &CalibrationLedger) -> Result<PredictionIntervalSet> {
    let mut lower = Vec::with_capacity(bundle.node_count());
    let mut upper = Vec::with_capacity(bundle.node_count());
    let mut unbounded = Vec::with_capacity(bundle.node_count());
    for (node, (mu, sigma)) in bundle.mu.iter().zip(&bundle.sigma).enumerate() {
        let q = ledger.quantile_for_node(node)?;
        if q.is_infinite() {
            lower.push(vec![f64::NEG_INFINITY; mu.len()]);
            upper.push(vec![f64::INFINITY; mu.len()]);
            unbounded.push(vec![true; mu.len()]);
        } else {
            lower.push(mu.iter().zip(sigma).map(|(m, s)| m - q * s).collect());
            upper.push(mu.iter().zip(sigma).map(|(m, s)| m + q * s).collect());
            unbounded.push(vec![false; mu.len()]);
        }
    }
    Ok(PredictionIntervalSet {
        lower,
        upper,
        unbounded,
        nominal_level: 1.0 - ledger.config.target_alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub coverage: f64,
    /// Mean interval width relative to the data range.
    pub riw: f64,
    pub efficiency: f64,
}

/// Coverage divided by relative interval width.
pub fn coverage_efficiency(coverage: f64, riw: f64) -> Result<f64> {
    if !(riw > 0.0) {
        return Err(Error::invalid(format!("relative interval width {riw} leaves efficiency undefined")));
    }
    Ok(coverage / riw)
}

/// Empirical coverage, relative interval width and their ratio.
pub fn evaluate_coverage(intervals: &PredictionIntervalSet, truths: &[Vec<f64>], data_range: f64) -> Result<CoverageReport> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::invalid(format!("data range must be positive, got {data_range}")));
    }
    if truths.len() != intervals.lower.len() {
        return Err(Error::dim("truth nodes", intervals.lower.len(), truths.len()));
    }
    let mut inside = 0usize;
    let mut total = 0usize;
    let mut width = 0.0;
    for (node, ys) in truths.iter().enumerate() {
        if ys.len() != intervals.lower[node].len() {
            return Err(Error::dim("truth horizons", intervals.lower[node].len(), ys.len()));
        }
        for (h, &y) in ys.iter().enumerate() {
            total += 1;
            if intervals.contains(node, h, y) {
                inside += 1;
            }
            width += intervals.upper[node][h] - intervals.lower[node][h];
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no truths to evaluate".into()));
    }
    let coverage = inside as f64 / total as f64;
    let riw = width / total as f64 / data_range;
    let efficiency = coverage_efficiency(coverage, riw)?;
    Ok(CoverageReport {
        coverage,
        riw,
        efficiency,
    })
}

/// `time,node,L,U` with one one-step set per time step; unbounded ends are
/// written as `-inf`/`inf`.
pub fn write_intervals_csv(path: &Path, steps: &[PredictionIntervalSet]) -> Result<()> {
    if let Some(t) = steps.iter().position(|s| s.lower.iter().any(|h| h.is_empty())) {
        return Err(Error::invalid(format!("interval set at time {t} has a node without a horizon")));
    }
    let rows = steps.iter().enumerate().flat_map(|(t, set)| {
        set.lower
            .iter()
            .zip(&set.upper)
            .enumerate()
            .map(move |(i, (l, u))| vec![t.to_string(), i.to_string(), fmt_f64(l[0]), fmt_f64(u[0])])
    });
    write_csv_rows(path, &["time", "node", "L", "U"], rows)
}
