//! Spatially and temporally dependent synthetic p-value panels.
//!
//! Latent field: `Z_t = phi Z_{t-1} + sqrt(1 - phi^2) L xi_t` with `L L^T`
//! the exponential kernel `exp(-d_ij / length_scale)` over node
//! coordinates, so `Z_t ~ N(0, K)` at every step. Test scores mix the field
//! with independent noise, `s = sqrt(w) Z + sqrt(1 - w) e`, keeping unit
//! marginal variance; `w` sets the dependence strength. Anomalous entries
//! get a positive shift. P-values are conformal against a fresh calibration
//! sample of i.i.d. null scores per panel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anomaly::bootstrap::{rho_block, BlockConfig};
use crate::anomaly::pvalue::{conformal_pvalue, trim_calibration};
use crate::error::{Error, Result};
use crate::forecaster::GraphTopology;
use crate::io::Panel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DependentNullConfig {
    pub length_scale_km: f64,
    pub ar_coef: f64,
    /// Share of score variance carried by the dependent field, in [0, 1].
    pub mix: f64,
    pub calibration_size: usize,
    pub anomaly_fraction: f64,
    pub anomaly_shift: f64,
}

impl Default for DependentNullConfig {
    fn default() -> Self {
        Self {
            length_scale_km: 1.0,
            ar_coef: 0.9,
            mix: 0.5,
            calibration_size: 1000,
            anomaly_fraction: 0.05,
            anomaly_shift: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullPanel {
    pub pvalues: Panel<f64>,
    pub truth: Panel<bool>,
}

pub struct DependentNullGenerator {
    config: DependentNullConfig,
    chol: DMatrix<f64>,
}

impl DependentNullGenerator {
    pub fn new(topology: &GraphTopology, config: DependentNullConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.mix) {
            return Err(Error::invalid(format!("mix weight {} outside [0, 1]", config.mix)));
        }
        if !(config.ar_coef.abs() < 1.0) {
            return Err(Error::invalid("AR coefficient must lie in (-1, 1)"));
        }
        if !(config.length_scale_km > 0.0) {
            return Err(Error::invalid("kernel length scale must be positive"));
        }
        if config.calibration_size == 0 {
            return Err(Error::invalid("calibration size must be positive"));
        }
        let m = topology.node_count();
        let mut k = DMatrix::from_fn(m, m, |i, j| (-topology.distance_km(i, j) / config.length_scale_km).exp());
        // Tiny jitter keeps the factorisation stable for near-duplicate points.
        for i in 0..m {
            k[(i, i)] += 1e-10;
        }
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::invalid("spatial kernel is not positive definite"))?
            .l();
        Ok(Self { config, chol })
    }

    pub fn config(&self) -> &DependentNullConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.chol.nrows()
    }

    /// Raw test scores and anomaly mask for `steps` time steps.
    pub fn scores(&self, steps: usize, rng: &mut ChaCha8Rng) -> (Panel<f64>, Panel<bool>) {
        let m = self.node_count();
        let c = &self.config;
        let innov = (1.0 - c.ar_coef * c.ar_coef).sqrt();
        let (wf, wn) = (c.mix.sqrt(), (1.0 - c.mix).sqrt());
        let gauss = |rng: &mut ChaCha8Rng| DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        let mut z = &self.chol * gauss(rng);
        let mut scores = Vec::with_capacity(steps);
        let mut truth = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 {
                z = &z * c.ar_coef + (&self.chol * gauss(rng)) * innov;
            }
            let mut row = Vec::with_capacity(m);
            let mut mask = Vec::with_capacity(m);
            for i in 0..m {
                let e: f64 = StandardNormal.sample(rng);
                let anomalous = rng.random::<f64>() < c.anomaly_fraction;
                let shift = if anomalous { c.anomaly_shift } else { 0.0 };
                row.push(wf * z[i] + wn * e + shift);
                mask.push(anomalous);
            }
            scores.push(row);
            truth.push(mask);
        }
        (scores, truth)
    }

    /// Conformal p-value panel against a fresh untrimmed null calibration set.
    pub fn panel(&self, steps: usize, rng: &mut ChaCha8Rng) -> NullPanel {
        let cal: Vec<f64> = (0..self.config.calibration_size)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        // tau = 0 cannot fail on a nonempty sample.
        let trimmed = trim_calibration(&cal, 0.0).expect("nonempty calibration");
        let (scores, truth) = self.scores(steps, rng);
        let pvalues = scores
            .iter()
            .map(|row| row.iter().map(|&s| conformal_pvalue(&trimmed, s)).collect())
            .collect();
        NullPanel { pvalues, truth }
    }
}

/// Bisection on the mix weight so that the null p-value panel reaches
/// `target_rho` under `block`. Returns the tuned config and achieved rho.
pub fn tune_dependence(
    topology: &GraphTopology,
    base: DependentNullConfig,
    block: BlockConfig,
    target_rho: f64,
    pilot_steps: usize,
    seed: u64,
) -> Result<(DependentNullConfig, f64)> {
    let measure = |mix: f64| -> Result<f64> {
        let cfg = DependentNullConfig {
            mix,
            anomaly_fraction: 0.0,
            ..base.clone()
        };
        let generator = DependentNullGenerator::new(topology, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let panel = generator.panel(pilot_steps, &mut rng);
        rho_block(&panel.pvalues, topology, block, 2000, seed)
    };
    let rho_max = measure(1.0)?;
    if rho_max < target_rho {
        return Err(Error::invalid(format!(
            "target rho_block {target_rho} unreachable: fully dependent field gives {rho_max:.3}"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = (1.0, rho_max);
    for _ in 0..25 {
        let mid = 0.5 * (lo + hi);
        let rho = measure(mid)?;
        if (rho - target_rho).abs() < (best.1 - target_rho).abs() {
            best = (mid, rho);
        }
        if rho < target_rho {
            lo = mid;
        } else {
            hi = mid;
        }
        if (rho - target_rho).abs() < 2e-3 {
            break;
        }
    }
    Ok((DependentNullConfig { mix: best.0, ..base }, best.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_pvalues_are_roughly_uniform() {
        let g = GraphTopology::lattice(6, 6, 1.0).unwrap();
        let cfg = DependentNullConfig {
            anomaly_fraction: 0.0,
            ..Default::default()
        };
        let generator = DependentNullGenerator::new(&g, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut below = 0usize;
        let mut total = 0usize;
        for _ in 0..20 {
            let p = generator.panel(100, &mut rng);
            below += p.pvalues.iter().flatten().filter(|&&v| v <= 0.2).count();
            total += 36 * 100;
        }
        let frac = below as f64 / total as f64;
        assert!((frac - 0.2).abs() < 0.03, "{frac}");
    }

    #[test]
    fn dependence_increases_with_mix() {
        let g = GraphTopology::lattice(8, 8, 1.0).unwrap();
        let block = BlockConfig { time_block: 10, space_hops: 2 };
        let rho = |mix| {
            let cfg = DependentNullConfig { mix, anomaly_fraction: 0.0, ..Default::default() };
            let generator = DependentNullGenerator::new(&g, cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            rho_block(&generator.panel(300, &mut rng).pvalues, &g, block, 1000, 2).unwrap()
        };
        let (a, b, c) = (rho(0.0), rho(0.5), rho(1.0));
        assert!(a.abs() < 0.05, "{a}");
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn invalid_config_rejected() {
        let g = GraphTopology::lattice(2, 2, 1.0).unwrap();
        let bad = DependentNullConfig { mix: 1.5, ..Default::default() };
        assert!(DependentNullGenerator::new(&g, bad).is_err());
        let bad = DependentNullConfig { ar_coef: 1.0, ..Default::default() };
        assert!(DependentNullGenerator::new(&g, bad).is_err());
    }
}
