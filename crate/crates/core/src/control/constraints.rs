use serde::{Deserialize, Serialize};

/// Thresholds for mean queue, mean wait and throughput.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSpec {
    /// Vehicles; violated above.
    pub d_queue: f64,
    /// Seconds; violated above.
    pub d_wait: f64,
    /// Fraction of `theta_base`; violated below.
    pub d_through: f64,
    pub theta_base: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            d_queue: 50.0,
            d_wait: 120.0,
            d_through: 0.8,
            theta_base: 1.0,
        }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = [self.d_queue, self.d_wait, self.d_through, self.theta_base]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(crate::Error::invalid("constraint thresholds must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mean_queue: f64,
    pub mean_wait: f64,
    pub throughput: f64,
}

/// `d_C = sum_k max(0, C_k - d_k)` with throughput counted from below.
pub fn constraint_violation(m: &AggregateMetrics, spec: &ConstraintSpec) -> f64 {
    (m.mean_queue - spec.d_queue).max(0.0)
        + (m.mean_wait - spec.d_wait).max(0.0)
        + (spec.d_through * spec.theta_base - m.throughput).max(0.0)
}

/// Constraint violation as a function of a control-state vector.
pub trait StateConstraint: Sync {
    fn violation(&self, s: &[f64]) -> f64;
}

/// `sum_i max(0, |s_i| - bound_i)` over the leading `bounds.len()` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub bounds: Vec<f64>,
}

impl StateConstraint for BoxConstraint {
    fn violation(&self, s: &[f64]) -> f64 {
        s.iter().zip(&self.bounds).map(|(x, b)| (x.abs() - b).max(0.0)).sum()
    }
}

/// Reads per-intersection `[queue, wait, throughput, ...]` blocks from the
/// front of the state vector and averages them across intersections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficConstraint {
    pub spec: ConstraintSpec,
    pub intersections: usize,
    pub local_features: usize,
    pub queue_offsets: Vec<usize>,
    pub wait_offset: usize,
    pub throughput_offset: usize,
}

impl TrafficConstraint {
    pub fn metrics(&self, s: &[f64]) -> AggregateMetrics {
        let n = self.intersections as f64;
        let mut m = AggregateMetrics {
            mean_queue: 0.0,
            mean_wait: 0.0,
            throughput: 0.0,
        };
        for j in 0..self.intersections {
            let base = j * self.local_features;
            m.mean_queue += self.queue_offsets.iter().map(|&o| s[base + o]).sum::<f64>();
            m.mean_wait += s[base + self.wait_offset];
            m.throughput += s[base + self.throughput_offset];
        }
        m.mean_queue /= n;
        m.mean_wait /= n;
        m.throughput /= n;
        m
    }
}

impl StateConstraint for TrafficConstraint {
    fn violation(&self, s: &[f64]) -> f64 {
        constraint_violation(&self.metrics(s), &self.spec)
    }
}
