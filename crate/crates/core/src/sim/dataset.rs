//! Synthetic observation panels with aligned anomaly masks and a
//! train / calibration / gap / test split.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::DEFAULT_TAU_GAP;
use crate::error::{Error, Result};
use crate::io::{read_json, read_mask_csv, read_panel_csv, write_json, write_mask_csv, write_panel_csv, Panel};
use crate::sim::config::SimConfig;
use crate::sim::env::{simulate_panels, TrafficSim};

pub const FLOWS_FILE: &str = "flows.csv";
pub const MASK_FILE: &str = "anomaly_mask.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const CONFIG_FILE: &str = "config.json";
/// Value column of the flow panel, vehicles per hour.
pub const FLOW_COLUMN: &str = "flow";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub cal_fraction: f64,
    /// Steps dropped between calibration and test.
    pub tau_gap: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            cal_fraction: 0.2,
            tau_gap: DEFAULT_TAU_GAP,
        }
    }
}

/// Half-open step ranges; `cal.end + tau_gap == test.start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub cal: Range<usize>,
    pub test: Range<usize>,
    pub tau_gap: usize,
}

/// Minimum steps in each segment.
pub const MIN_SEGMENT: usize = 10;

impl SplitIndices {
    pub fn new(steps: usize, spec: &SplitSpec) -> Result<Self> {
        let (a, b) = (spec.train_fraction, spec.cal_fraction);
        if !(a > 0.0 && b > 0.0 && a + b < 1.0) {
            return Err(Error::invalid(format!("split fractions {a} + {b} must be positive and sum below 1")));
        }
        let train_end = (a * steps as f64).round() as usize;
        let cal_end = train_end + (b * steps as f64).round() as usize;
        let test_start = cal_end + spec.tau_gap;
        if train_end < MIN_SEGMENT || cal_end - train_end < MIN_SEGMENT || test_start + MIN_SEGMENT > steps {
            return Err(Error::InsufficientData(format!(
                "{steps} steps cannot hold train, calibration, a gap of {} and test segments of at least {MIN_SEGMENT} steps",
                spec.tau_gap
            )));
        }
        Ok(Self {
            train: 0..train_end,
            cal: train_end..cal_end,
            test: test_start..steps,
            tau_gap: spec.tau_gap,
        })
    }

    pub fn steps(&self) -> usize {
        self.test.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    /// `[time][cell]`, vehicles per hour.
    pub flows: Panel<f64>,
    pub mask: Panel<bool>,
    pub split: SplitIndices,
}

/// Simulate `steps` steps under the queue-pressure policy.
pub fn generate_dataset(config: &SimConfig, steps: usize, spec: &SplitSpec) -> Result<Dataset> {
    let split = SplitIndices::new(steps, spec)?;
    let mut sim = TrafficSim::init_grid(config.clone())?;
    let (flows, mask) = simulate_panels(&mut sim, steps)?;
    Ok(Dataset {
        config: config.clone(),
        flows,
        mask,
        split,
    })
}

impl Dataset {
    pub fn cell_count(&self) -> usize {
        self.flows.first().map_or(0, Vec::len)
    }

    /// Writes flows, mask, split, coverage and config files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        if !dir.is_dir() {
            return Err(Error::invalid(format!("output directory {} does not exist", dir.display())));
        }
        let geometry = crate::sim::env::GridGeometry::new(&self.config)?;
        write_panel_csv(&dir.join(FLOWS_FILE), FLOW_COLUMN, &self.flows)?;
        write_mask_csv(&dir.join(MASK_FILE), &self.mask)?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        write_json(&dir.join(COVERAGE_FILE), &geometry.coverage)?;
        write_json(&dir.join(CONFIG_FILE), &self.config)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let config: SimConfig = read_json(&dir.join(CONFIG_FILE))?;
        config.validate()?;
        let flows = read_panel_csv(&dir.join(FLOWS_FILE), FLOW_COLUMN)?;
        let mask = read_mask_csv(&dir.join(MASK_FILE))?;
        let split: SplitIndices = read_json(&dir.join(SPLIT_FILE))?;
        if flows.len() != split.steps() || mask.len() != flows.len() {
            return Err(Error::invalid(format!(
                "dataset length mismatch: split covers {} steps, flows {}, mask {}",
                split.steps(),
                flows.len(),
                mask.len()
            )));
        }
        let cells = config.cell_count();
        if flows.iter().any(|r| r.len() != cells) || mask.iter().any(|r| r.len() != cells) {
            return Err(Error::dim("dataset cells", cells, flows.first().map_or(0, Vec::len)));
        }
        Ok(Self { config, flows, mask, split })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::AnomalySchedule;

    fn small() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn split_layout() {
        let s = SplitIndices::new(1000, &SplitSpec::default()).unwrap();
        assert_eq!(s.train, 0..600);
        assert_eq!(s.cal, 600..800);
        assert_eq!(s.test, 824..1000);
        assert_eq!(s.test.start - s.cal.end, 24);
        assert!(SplitIndices::new(100, &SplitSpec::default()).is_err());
        let bad = SplitSpec { train_fraction: 0.9, cal_fraction: 0.2, ..Default::default() };
        assert!(SplitIndices::new(1000, &bad).is_err());
    }

    #[test]
    fn files_are_byte_identical_for_same_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for dir in [&a, &b] {
            generate_dataset(&small(), 300, &SplitSpec::default()).unwrap().write(dir.path()).unwrap();
        }
        for f in [FLOWS_FILE, MASK_FILE, SPLIT_FILE, COVERAGE_FILE, CONFIG_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let back = Dataset::read(a.path()).unwrap();
        assert_eq!(back, generate_dataset(&small(), 300, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn missing_directory_rejected() {
        let d = generate_dataset(&small(), 300, &SplitSpec::default()).unwrap();
        assert!(d.write(Path::new("/nonexistent/dir")).is_err());
    }

    #[test]
    fn noiseless_test_set_matches_weekly_seasonal_oracle() {
        let cfg = SimConfig {
            stochastic: false,
            sensor_noise: 0.0,
            anomaly: AnomalySchedule { rate: 0.0, ..Default::default() },
            ..Default::default()
        };
        let week = (7.0 * cfg.steps_per_day()) as usize;
        let d = generate_dataset(&cfg, 4 * week, &SplitSpec::default()).unwrap();
        let mut worst: f64 = 0.0;
        for t in d.split.test.clone() {
            for (a, b) in d.flows[t].iter().zip(&d.flows[t - week]) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
        assert!(d.mask.iter().flatten().all(|m| !m));
    }
}
