use serde::{Deserialize, Serialize};

use crate::conformal::aci::{aci_update, AciSign, DEFAULT_GAMMA_ACI};
use crate::conformal::cluster::ClusterAssignment;
use crate::error::{Error, Result};
use crate::io::inf_as_null;
use crate::math::{ceil_tol, sort_f64};

pub const DEFAULT_TAU_GAP: usize = 24;

/// `|y - mu| / sigma` elementwise.
pub fn conformity_scores(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != y.len() {
        return Err(Error::dim("conformity mu", y.len(), mu.len()));
    }
    if sigma.len() != y.len() {
        return Err(Error::dim("conformity sigma", y.len(), sigma.len()));
    }
    y.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((y, m), s)| {
            if *s > 0.0 {
                Ok((y - m).abs() / s)
            } else {
                Err(Error::invalid(format!("sigma must be positive, got {s}")))
            }
        })
        .collect()
}

/// Finite-sample corrected quantile: the `ceil((1 - alpha)(n + 1))`-th
/// smallest score, or `+inf` when that rank exceeds `n`.
pub fn cluster_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InsufficientData("empty calibration score set".into()));
    }
    let mut sorted = scores.to_vec();
    sort_f64(&mut sorted);
    quantile_of_sorted(&sorted, alpha)
}

fn quantile_of_sorted(sorted: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("miscoverage level {alpha} outside (0, 1)")));
    }
    let n = sorted.len();
    let rank = ceil_tol((1.0 - alpha) * (n as f64 + 1.0)).max(1.0) as usize;
    if rank > n {
        Ok(f64::INFINITY)
    } else {
        Ok(sorted[rank - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LedgerConfig {
    pub target_alpha: f64,
    pub gamma_aci: f64,
    pub tau_gap: usize,
    pub aci_sign: AciSign,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            target_alpha: 0.1,
            gamma_aci: DEFAULT_GAMMA_ACI,
            tau_gap: DEFAULT_TAU_GAP,
            aci_sign: AciSign::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCalibration {
    /// Sorted ascending.
    pub scores: Vec<f64>,
    pub alpha_t: f64,
    /// Quantile at the current `alpha_t`; `null` in JSON means unbounded.
    #[serde(with = "inf_as_null")]
    pub quantile: f64,
}

/// Per-cluster conformity scores, quantiles and adaptive levels.
///
/// Mutated only through [`CalibrationLedger::record_outcome`] and
/// [`CalibrationLedger::recalibrate`]; share behind a lock for concurrent
/// readers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLedger {
    pub config: LedgerConfig,
    /// Cluster id of every node.
    pub labels: Vec<usize>,
    pub clusters: Vec<ClusterCalibration>,
}

impl CalibrationLedger {
    /// Pool each node's calibration scores into its cluster.
    pub fn new(assignment: &ClusterAssignment, node_scores: &[Vec<f64>], config: LedgerConfig) -> Result<Self> {
        if node_scores.len() != assignment.labels.len() {
            return Err(Error::dim("calibration score panel", assignment.labels.len(), node_scores.len()));
        }
        let mut pooled = vec![Vec::new(); assignment.k];
        for (&label, scores) in assignment.labels.iter().zip(node_scores) {
            if scores.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::invalid("conformity scores must be nonnegative"));
            }
            pooled[label].extend_from_slice(scores);
        }
        let clusters = pooled
            .into_iter()
            .enumerate()
            .map(|(k, mut scores)| {
                if scores.is_empty() {
                    return Err(Error::InsufficientData(format!("cluster {k} has no calibration scores")));
                }
                sort_f64(&mut scores);
                let quantile = quantile_of_sorted(&scores, config.target_alpha)?;
                Ok(ClusterCalibration {
                    scores,
                    alpha_t: config.target_alpha,
                    quantile,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            labels: assignment.labels.clone(),
            clusters,
        })
    }

    pub fn cluster_of(&self, node: usize) -> Result<usize> {
        let k = *self
            .labels
            .get(node)
            .ok_or_else(|| Error::invalid(format!("node {node} has no cluster")))?;
        if k >= self.clusters.len() {
            return Err(Error::invalid(format!("node {node} maps to missing cluster {k}")));
        }
        Ok(k)
    }

    pub fn quantile_for_node(&self, node: usize) -> Result<f64> {
        Ok(self.clusters[self.cluster_of(node)?].quantile)
    }

    /// ACI step for `cluster` after observing whether the truth fell outside.
    pub fn record_outcome(&mut self, cluster: usize, miscovered: bool) -> Result<()> {
        let cfg = self.config.clone();
        let c = self
            .clusters
            .get_mut(cluster)
            .ok_or_else(|| Error::invalid(format!("unknown cluster {cluster}")))?;
        c.alpha_t = aci_update(c.alpha_t, miscovered, cfg.gamma_aci, cfg.target_alpha, cfg.aci_sign);
        c.quantile = quantile_of_sorted(&c.scores, c.alpha_t)?;
        Ok(())
    }

    /// Replace a cluster's scores and reset its level to the target.
    pub fn recalibrate(&mut self, cluster: usize, mut scores: Vec<f64>) -> Result<()> {
        if scores.is_empty() {
            return Err(Error::InsufficientData(format!("cluster {cluster} recalibrated with no scores")));
        }
        let alpha = self.config.target_alpha;
        let c = self
            .clusters
            .get_mut(cluster)
            .ok_or_else(|| Error::invalid(format!("unknown cluster {cluster}")))?;
        sort_f64(&mut scores);
        c.quantile = quantile_of_sorted(&scores, alpha)?;
        c.scores = scores;
        c.alpha_t = alpha;
        Ok(())
    }
}
