//! Cell-level forecasting, conformal calibration and anomaly detection on
//! simulated flow panels.
//!
//! Each cell is forecast one step ahead from `[y_{t-1}, y_{t-2}, mean of
//! neighbours at t-1, sin tod, cos tod]` by a single pooled heteroscedastic
//! predictor. Calibration-segment residuals feed both the clustered interval
//! ledger and a trimmed pool of anomaly scores.

use std::f64::consts::TAU;
use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::{
    bh_procedure, conformal_pvalue, empirical_fdr, fit_scorer, normalize_residuals, trim_calibration, BandwidthRule,
    FdrProcedure, ScoreProvider, Scorer, ScorerKind, TrimmedCalibration, DEFAULT_RESIDUAL_EPS, DEFAULT_TRIM,
};
use crate::conformal::{
    build_intervals, cluster_nodes, conformity_scores, error_statistics, CalibrationLedger, ForecastBundle, LedgerConfig,
    PredictionIntervalSet, DEFAULT_CLUSTERS,
};
use crate::error::{Error, Result};
use crate::forecaster::{fit_heteroscedastic, GraphTopology, HetFitConfig, HetPredictor};
use crate::io::Panel;
use crate::sim::config::SimConfig;
use crate::sim::dataset::Dataset;

pub const FEATURE_DIM: usize = 5;
/// Training pairs are subsampled to at most this many.
pub const MAX_TRAIN_SAMPLES: usize = 20_000;
/// Lags needed before the first forecast.
pub const WARMUP_LAGS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Interval miscoverage target.
    pub alpha: f64,
    pub clusters: usize,
    pub ledger: LedgerConfig,
    pub trim: f64,
    pub fdr_alpha: f64,
    pub procedure: FdrProcedure,
    pub scorer: ScorerKind,
    pub het: HetFitConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            clusters: DEFAULT_CLUSTERS,
            ledger: LedgerConfig::default(),
            trim: DEFAULT_TRIM,
            fdr_alpha: 0.05,
            procedure: FdrProcedure::By,
            scorer: ScorerKind::GaussianNll,
            het: HetFitConfig::default(),
            seed: 0,
        }
    }
}

/// Predictor features for every cell at step `t` given the two previous rows.
pub fn feature_rows(prev1: &[f64], prev2: &[f64], topology: &GraphTopology, seconds_of_day: f64) -> Vec<[f64; FEATURE_DIM]> {
    let phase = TAU * seconds_of_day / 86_400.0;
    let (s, c) = phase.sin_cos();
    (0..prev1.len())
        .map(|i| {
            let nb: Vec<usize> = topology.neighbors(i).iter().copied().filter(|&k| k != i).collect();
            let nb_mean = if nb.is_empty() {
                prev1[i]
            } else {
                nb.iter().map(|&k| prev1[k]).sum::<f64>() / nb.len() as f64
            };
            [prev1[i], prev2[i], nb_mean, s, c]
        })
        .collect()
}

/// Everything fitted by calibration; serialised as the ledger file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub config: DetectorConfig,
    pub predictor: HetPredictor,
    pub scorer: ScoreProvider,
    pub ledger: CalibrationLedger,
    pub anomaly_calibration: TrimmedCalibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDetection {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub intervals: PredictionIntervalSet,
    pub pvalues: Vec<f64>,
    pub rejected: Vec<bool>,
}

impl CalibrationArtifact {
    pub fn forecast(&self, prev1: &[f64], prev2: &[f64], topology: &GraphTopology, seconds_of_day: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if prev1.len() != topology.node_count() || prev2.len() != prev1.len() {
            return Err(Error::dim("flow history", topology.node_count(), prev1.len().min(prev2.len())));
        }
        let mut mu = Vec::with_capacity(prev1.len());
        let mut sigma = Vec::with_capacity(prev1.len());
        for x in feature_rows(prev1, prev2, topology, seconds_of_day) {
            let (m, s) = self.predictor.predict(&x)?;
            mu.push(m);
            sigma.push(s);
        }
        Ok((mu, sigma))
    }

    /// Conformal p-value of every cell's anomaly score.
    pub fn pvalues(&self, y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
        let z = normalize_residuals(y, mu, sigma, DEFAULT_RESIDUAL_EPS)?;
        Ok(z.iter().map(|&v| conformal_pvalue(&self.anomaly_calibration, self.scorer.score(v))).collect())
    }

    /// Forecast, intervals, p-values and step-up rejections for one step.
    pub fn detect_step(
        &self,
        ledger: &CalibrationLedger,
        history: (&[f64], &[f64]),
        y: &[f64],
        topology: &GraphTopology,
        seconds_of_day: f64,
    ) -> Result<StepDetection> {
        let (mu, sigma) = self.forecast(history.0, history.1, topology, seconds_of_day)?;
        let intervals = build_intervals(&ForecastBundle::one_step(&mu, &sigma)?, ledger)?;
        let pvalues = self.pvalues(y, &mu, &sigma)?;
        let rejected = self.config.procedure.apply(&pvalues, self.config.fdr_alpha)?.rejected;
        Ok(StepDetection {
            mu,
            sigma,
            intervals,
            pvalues,
            rejected,
        })
    }
}

impl CalibrationArtifact {
    /// Re-trim the anomaly calibration scores of the calibration segment at
    /// level `trim`, keeping the predictor, scorer and ledger.
    pub fn retrim(&mut self, dataset: &Dataset, topology: &GraphTopology, trim: f64) -> Result<()> {
        let cal = dataset.split.cal.start.max(WARMUP_LAGS)..dataset.split.cal.end;
        let (mu, sigma) = forecast_panel(self, &dataset.flows, cal.clone(), topology, &dataset.config)?;
        let mut scores = Vec::with_capacity(cal.len() * dataset.cell_count());
        for ((y, m), s) in dataset.flows[cal].iter().zip(&mu).zip(&sigma) {
            let z = normalize_residuals(y, m, s, DEFAULT_RESIDUAL_EPS)?;
            scores.extend(z.into_iter().map(|v| self.scorer.score(v)));
        }
        self.anomaly_calibration = trim_calibration(&scores, trim)?;
        self.config.trim = trim;
        Ok(())
    }
}

/// `(mu, sigma)` panels for the steps in `range` (each needs two prior rows).
pub fn forecast_panel(
    artifact: &CalibrationArtifact,
    flows: &Panel<f64>,
    range: Range<usize>,
    topology: &GraphTopology,
    sim: &SimConfig,
) -> Result<(Panel<f64>, Panel<f64>)> {
    if range.start < WARMUP_LAGS || range.end > flows.len() {
        return Err(Error::invalid(format!("forecast range {range:?} needs two prior steps within {} rows", flows.len())));
    }
    let mut mus = Vec::with_capacity(range.len());
    let mut sigmas = Vec::with_capacity(range.len());
    for t in range {
        let (m, s) = artifact.forecast(&flows[t - 1], &flows[t - 2], topology, sim.clock(t).0)?;
        mus.push(m);
        sigmas.push(s);
    }
    Ok((mus, sigmas))
}

fn transpose(panel: &Panel<f64>) -> Vec<Vec<f64>> {
    let m = panel.first().map_or(0, Vec::len);
    (0..m).map(|i| panel.iter().map(|row| row[i]).collect()).collect()
}

/// Fit the predictor on the train segment and calibrate on the calibration segment.
pub fn fit_calibration(dataset: &Dataset, topology: &GraphTopology, config: &DetectorConfig) -> Result<CalibrationArtifact> {
    if topology.node_count() != dataset.cell_count() {
        return Err(Error::dim("cell topology", dataset.cell_count(), topology.node_count()));
    }
    let split = &dataset.split;
    let flows = &dataset.flows;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in split.train.start.max(WARMUP_LAGS)..split.train.end {
        let rows = feature_rows(&flows[t - 1], &flows[t - 2], topology, dataset.config.clock(t).0);
        for (x, &y) in rows.into_iter().zip(&flows[t]) {
            xs.push(x.to_vec());
            ys.push(y);
        }
    }
    if xs.len() > MAX_TRAIN_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut keep = sample(&mut rng, xs.len(), MAX_TRAIN_SAMPLES).into_vec();
        keep.sort_unstable();
        xs = keep.iter().map(|&k| std::mem::take(&mut xs[k])).collect();
        ys = keep.iter().map(|&k| ys[k]).collect();
    }
    let predictor = fit_heteroscedastic(&xs, &ys, &config.het)?.predictor;
    let mut artifact_stub = CalibrationArtifact {
        config: config.clone(),
        predictor,
        scorer: ScoreProvider::GaussianNll { mean: 0.0, variance: 1.0 },
        ledger: CalibrationLedger {
            config: config.ledger.clone(),
            labels: Vec::new(),
            clusters: Vec::new(),
        },
        anomaly_calibration: trim_calibration(&[0.0], 0.0)?,
    };

    // Scorer on normalised train residuals.
    let mut z_train = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(&ys) {
        let (m, s) = artifact_stub.predictor.predict(x)?;
        z_train.push((y - m) / (s + DEFAULT_RESIDUAL_EPS));
    }
    artifact_stub.scorer = fit_scorer(&z_train, config.scorer, BandwidthRule::Silverman)?;

    let cal = split.cal.start.max(WARMUP_LAGS)..split.cal.end;
    let (mu, sigma) = forecast_panel(&artifact_stub, flows, cal.clone(), topology, &dataset.config)?;
    let truth: Panel<f64> = flows[cal].to_vec();
    let residuals: Panel<f64> = truth
        .iter()
        .zip(&mu)
        .map(|(y, m)| y.iter().zip(m).map(|(a, b)| a - b).collect())
        .collect();
    let mut scores_by_node = vec![Vec::with_capacity(truth.len()); dataset.cell_count()];
    let mut anomaly_scores = Vec::with_capacity(truth.len() * dataset.cell_count());
    for ((y, m), s) in truth.iter().zip(&mu).zip(&sigma) {
        for (i, c) in conformity_scores(y, m, s)?.into_iter().enumerate() {
            scores_by_node[i].push(c);
        }
        let z = normalize_residuals(y, m, s, DEFAULT_RESIDUAL_EPS)?;
        anomaly_scores.extend(z.into_iter().map(|v| artifact_stub.scorer.score(v)));
    }
    let stats = error_statistics(&transpose(&residuals));
    let k = config.clusters.min(dataset.cell_count());
    let assignment = cluster_nodes(&stats, k, config.seed)?;
    let ledger_config = LedgerConfig {
        target_alpha: config.alpha,
        ..config.ledger.clone()
    };
    artifact_stub.ledger = CalibrationLedger::new(&assignment, &scores_by_node, ledger_config)?;
    artifact_stub.anomaly_calibration = trim_calibration(&anomaly_scores, config.trim)?;
    Ok(artifact_stub)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrSummary {
    pub procedure: FdrProcedure,
    pub alpha: f64,
    /// Mean per-step false discovery proportion.
    pub mean_fdr: f64,
    pub mean_power: f64,
    pub rejections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPanel {
    pub range: Range<usize>,
    pub mu: Panel<f64>,
    pub sigma: Panel<f64>,
    pub pvalues: Panel<f64>,
    pub by_rejected: Panel<bool>,
    pub bh_rejected: Panel<bool>,
}

/// Static-ledger detection over `range`, with BY and BH side by side.
pub fn detect_panel(artifact: &CalibrationArtifact, dataset: &Dataset, range: Range<usize>, topology: &GraphTopology) -> Result<DetectionPanel> {
    if range.is_empty() {
        return Err(Error::InsufficientData("empty detection range".into()));
    }
    let (mu, sigma) = forecast_panel(artifact, &dataset.flows, range.clone(), topology, &dataset.config)?;
    let mut out = DetectionPanel {
        range: range.clone(),
        mu: Vec::new(),
        sigma: Vec::new(),
        pvalues: Vec::with_capacity(range.len()),
        by_rejected: Vec::with_capacity(range.len()),
        bh_rejected: Vec::with_capacity(range.len()),
    };
    for (k, t) in range.enumerate() {
        let p = artifact.pvalues(&dataset.flows[t], &mu[k], &sigma[k])?;
        out.by_rejected.push(FdrProcedure::By.apply(&p, artifact.config.fdr_alpha)?.rejected);
        out.bh_rejected.push(bh_procedure(&p, artifact.config.fdr_alpha)?.rejected);
        out.pvalues.push(p);
    }
    out.mu = mu;
    out.sigma = sigma;
    Ok(out)
}

/// Average per-step FDR and power of `rejected` against `truth`.
pub fn summarize_fdr(procedure: FdrProcedure, alpha: f64, rejected: &Panel<bool>, truth: &Panel<bool>) -> Result<FdrSummary> {
    if rejected.len() != truth.len() || rejected.is_empty() {
        return Err(Error::dim("ground-truth steps", rejected.len(), truth.len()));
    }
    let mut fdr = 0.0;
    let mut power = 0.0;
    let mut rejections = 0;
    for (r, t) in rejected.iter().zip(truth) {
        let (f, p) = empirical_fdr(r, t)?;
        fdr += f;
        power += p;
        rejections += r.iter().filter(|&&x| x).count();
    }
    let n = rejected.len() as f64;
    Ok(FdrSummary {
        procedure,
        alpha,
        mean_fdr: fdr / n,
        mean_power: power / n,
        rejections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::dataset::{generate_dataset, SplitSpec};
    use crate::sim::env::GridGeometry;

    fn fitted() -> (Dataset, GraphTopology, CalibrationArtifact) {
        let cfg = SimConfig::default();
        let d = generate_dataset(&cfg, 1500, &SplitSpec::default()).unwrap();
        let topo = GridGeometry::new(&cfg).unwrap().cell_topology;
        let det = DetectorConfig {
            het: HetFitConfig { iterations: 300, ..Default::default() },
            ..Default::default()
        };
        let a = fit_calibration(&d, &topo, &det).unwrap();
        (d, topo, a)
    }

    #[test]
    fn calibration_covers_test_segment_and_detects() {
        let (d, topo, a) = fitted();
        assert_eq!(a.ledger.clusters.len(), 15);
        let test = d.split.test.clone();
        let (mu, sigma) = forecast_panel(&a, &d.flows, test.clone(), &topo, &d.config).unwrap();
        let mut inside = 0;
        let mut total = 0;
        for (k, t) in test.clone().enumerate() {
            let iv = build_intervals(&ForecastBundle::one_step(&mu[k], &sigma[k]).unwrap(), &a.ledger).unwrap();
            for (i, &y) in d.flows[t].iter().enumerate() {
                total += 1;
                inside += usize::from(iv.contains(i, 0, y));
            }
        }
        let cov = inside as f64 / total as f64;
        assert!(cov > 0.8 && cov < 0.97, "{cov}");
        let panel = detect_panel(&a, &d, test.clone(), &topo).unwrap();
        let truth = d.mask[test].to_vec();
        let by = summarize_fdr(FdrProcedure::By, 0.05, &panel.by_rejected, &truth).unwrap();
        let bh = summarize_fdr(FdrProcedure::Bh, 0.05, &panel.bh_rejected, &truth).unwrap();
        assert!(by.rejections <= bh.rejections);
    }

    #[test]
    fn untrimmed_null_detection_controls_fdr() {
        let cfg = SimConfig {
            anomaly: crate::sim::config::AnomalySchedule { rate: 0.0, ..Default::default() },
            ..Default::default()
        };
        let d = generate_dataset(&cfg, 1500, &SplitSpec::default()).unwrap();
        let topo = GridGeometry::new(&cfg).unwrap().cell_topology;
        let fdr = |trim| {
            let det = DetectorConfig {
                trim,
                het: HetFitConfig { iterations: 300, ..Default::default() },
                ..Default::default()
            };
            let a = fit_calibration(&d, &topo, &det).unwrap();
            let panel = detect_panel(&a, &d, d.split.test.clone(), &topo).unwrap();
            let truth = d.mask[d.split.test.clone()].to_vec();
            summarize_fdr(FdrProcedure::By, 0.05, &panel.by_rejected, &truth).unwrap().mean_fdr
        };
        assert!(fdr(0.0) <= 0.05);
        // Trimming clean calibration data exposes the null tail.
        assert!(fdr(0.02) > 0.5);
    }

    #[test]
    fn artifact_json_round_trip_is_byte_stable() {
        let (_, _, a) = fitted();
        let bytes = serde_json::to_vec_pretty(&a).unwrap();
        let back: CalibrationArtifact = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(serde_json::to_vec_pretty(&back).unwrap(), bytes);
    }

    #[test]
    fn retrim_matches_fit_at_that_level() {
        let (d, topo, mut a) = fitted();
        let det = DetectorConfig {
            trim: 0.0,
            het: HetFitConfig { iterations: 300, ..Default::default() },
            ..Default::default()
        };
        let fresh = fit_calibration(&d, &topo, &det).unwrap();
        a.retrim(&d, &topo, 0.0).unwrap();
        assert_eq!(a, fresh);
    }
}
