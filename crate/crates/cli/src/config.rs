use std::path::Path;

use serde::{Deserialize, Serialize};
use tsafe_core::anomaly::{BlockConfig, FdrProcedure, DEFAULT_BLOCK_GRID, DEFAULT_REPLICATES};
use tsafe_core::sim::{ClosedLoopConfig, SimConfig, SplitSpec};
use tsafe_core::sim::detect::DetectorConfig;

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub replicates: usize,
    pub blocks: Vec<BlockConfig>,
    pub alpha: f64,
    pub procedure: FdrProcedure,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            blocks: DEFAULT_BLOCK_GRID.to_vec(),
            alpha: 0.05,
            procedure: FdrProcedure::By,
        }
    }
}

/// Every subcommand reads its section; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Simulator used by `generate`.
    pub sim: SimConfig,
    pub steps: usize,
    pub split: SplitSpec,
    pub detector: DetectorConfig,
    /// Nominal central-interval levels for the reliability curve.
    pub reliability_levels: Vec<f64>,
    /// Simulator, detector and controller used by `certify` and `simulate`.
    pub closed_loop: ClosedLoopConfig,
    pub seeds: usize,
    pub audit: AuditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            steps: 5000,
            split: SplitSpec::default(),
            detector: DetectorConfig::default(),
            reliability_levels: (1..10).map(|k| k as f64 / 10.0).collect(),
            closed_loop: ClosedLoopConfig::default(),
            seeds: 10,
            audit: AuditConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
    }

    /// Route one seed to every subsystem.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.detector.seed = seed;
        self.closed_loop.seed = seed;
        self.closed_loop.sim.seed = seed;
        self.closed_loop.detector.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.sim.seed
    }
}
