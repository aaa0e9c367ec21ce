//! Spatio-temporal block bootstrap of p-value panels.
//!
//! A block is `b_t` consecutive time steps times the `b_s`-hop
//! neighbourhood of a node. A replicate panel is assembled from randomly
//! placed time windows; within each window the hypothesis family is
//! rebuilt from randomly centred spatial neighbourhoods until it has `m`
//! members. The chosen procedure is run on every replicate time step and
//! the per-step FDR averaged, giving one FDR value per replicate.
//!
//! `rho_block` is the average pairwise correlation of p-values that share a
//! block, estimated from block sums:
//! `Var(S_b) = n_b v + n_b (n_b - 1) rho v`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::fdr::{empirical_fdr, FdrProcedure};
use crate::error::{Error, Result};
use crate::forecaster::GraphTopology;
use crate::io::Panel;
use crate::math::{quantile_sorted, sort_f64};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const MIN_REPLICATES: usize = 100;

/// `{5, 10, 20}` time steps by `{1, 2, 4}` spatial hops.
pub const DEFAULT_BLOCK_GRID: [BlockConfig; 9] = [
    BlockConfig { time_block: 5, space_hops: 1 },
    BlockConfig { time_block: 5, space_hops: 2 },
    BlockConfig { time_block: 5, space_hops: 4 },
    BlockConfig { time_block: 10, space_hops: 1 },
    BlockConfig { time_block: 10, space_hops: 2 },
    BlockConfig { time_block: 10, space_hops: 4 },
    BlockConfig { time_block: 20, space_hops: 1 },
    BlockConfig { time_block: 20, space_hops: 2 },
    BlockConfig { time_block: 20, space_hops: 4 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub time_block: usize,
    pub space_hops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub blocks: Vec<BlockConfig>,
    pub replicates: usize,
    pub alpha: f64,
    pub procedure: FdrProcedure,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            blocks: DEFAULT_BLOCK_GRID.to_vec(),
            replicates: DEFAULT_REPLICATES,
            alpha: 0.05,
            procedure: FdrProcedure::By,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub time_block: usize,
    pub space_hops: usize,
    pub rho_block: f64,
    pub fdr_mean: f64,
    pub fdr_q95: f64,
    /// Diagnostic only: whether `fdr_q95 <= alpha`.
    pub within_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub procedure: FdrProcedure,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    pub blocks: Vec<BlockReport>,
}

fn block_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Node ordering of one spatial resample: concatenated hop neighbourhoods
/// of random centres, truncated to the node count.
fn spatial_resample(topology: &GraphTopology, hops: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = topology.node_count();
    let mut nodes = Vec::with_capacity(m);
    while nodes.len() < m {
        let center = rng.random_range(0..m);
        nodes.extend(topology.hop_neighborhood(center, hops));
    }
    nodes.truncate(m);
    nodes
}

fn check_panel(panel: &Panel<f64>, topology: &GraphTopology) -> Result<()> {
    let m = topology.node_count();
    if panel.is_empty() {
        return Err(Error::InsufficientData("empty p-value panel".into()));
    }
    if let Some(row) = panel.iter().find(|r| r.len() != m) {
        return Err(Error::dim("p-value panel row", m, row.len()));
    }
    Ok(())
}

/// Average within-block pairwise correlation of panel entries.
///
/// Uses `samples` randomly placed blocks. Returns 1 for a constant panel.
pub fn rho_block(panel: &Panel<f64>, topology: &GraphTopology, block: BlockConfig, samples: usize, seed: u64) -> Result<f64> {
    check_panel(panel, topology)?;
    let t_len = panel.len();
    if block.time_block == 0 || block.time_block > t_len {
        return Err(Error::InsufficientData(format!(
            "time block {} does not fit a panel of {t_len} steps",
            block.time_block
        )));
    }
    let count = (t_len * topology.node_count()) as f64;
    let grand = panel.iter().flatten().sum::<f64>() / count;
    let var = panel.iter().flatten().map(|p| (p - grand).powi(2)).sum::<f64>() / count;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let mut rng = block_rng(seed, u64::MAX);
    let mut acc = 0.0;
    let mut used = 0usize;
    for _ in 0..samples.max(1) {
        let start = rng.random_range(0..=t_len - block.time_block);
        let center = rng.random_range(0..topology.node_count());
        let nodes = topology.hop_neighborhood(center, block.space_hops);
        let n_b = (block.time_block * nodes.len()) as f64;
        if n_b < 2.0 {
            continue;
        }
        let sum: f64 = panel[start..start + block.time_block]
            .iter()
            .map(|row| nodes.iter().map(|&j| row[j]).sum::<f64>())
            .sum();
        acc += ((sum - n_b * grand).powi(2) / var - n_b) / (n_b * (n_b - 1.0));
        used += 1;
    }
    if used == 0 {
        return Err(Error::InsufficientData("blocks contain a single entry".into()));
    }
    Ok(acc / used as f64)
}

fn replicate_fdr(
    panel: &Panel<f64>,
    truth: &Panel<bool>,
    topology: &GraphTopology,
    block: BlockConfig,
    config: &BootstrapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t_len = panel.len();
    let mut fdr_sum = 0.0;
    let mut steps = 0usize;
    while steps < t_len {
        let start = rng.random_range(0..=t_len - block.time_block);
        let nodes = spatial_resample(topology, block.space_hops, rng);
        for t in start..start + block.time_block {
            if steps == t_len {
                break;
            }
            let p: Vec<f64> = nodes.iter().map(|&j| panel[t][j]).collect();
            let mask: Vec<bool> = nodes.iter().map(|&j| truth[t][j]).collect();
            let result = config.procedure.apply(&p, config.alpha)?;
            fdr_sum += empirical_fdr(&result.rejected, &mask)?.0;
            steps += 1;
        }
    }
    Ok(fdr_sum / t_len as f64)
}

/// Block-bootstrap FDR distribution for each block configuration.
pub fn block_bootstrap_verify(
    panel: &Panel<f64>,
    truth: &Panel<bool>,
    topology: &GraphTopology,
    config: &BootstrapConfig,
) -> Result<DependenceReport> {
    check_panel(panel, topology)?;
    if truth.len() != panel.len() {
        return Err(Error::dim("ground-truth mask steps", panel.len(), truth.len()));
    }
    if let Some(row) = truth.iter().find(|r| r.len() != topology.node_count()) {
        return Err(Error::dim("ground-truth mask row", topology.node_count(), row.len()));
    }
    if config.replicates < MIN_REPLICATES {
        return Err(Error::invalid(format!(
            "{} bootstrap replicates, at least {MIN_REPLICATES} required",
            config.replicates
        )));
    }
    if config.blocks.is_empty() {
        return Err(Error::invalid("no block configurations given"));
    }
    let largest = config.blocks.iter().map(|b| b.time_block).max().unwrap_or(0);
    if largest == 0 || largest > panel.len() {
        return Err(Error::InsufficientData(format!(
            "panel of {} steps is smaller than the largest time block {largest}",
            panel.len()
        )));
    }

    let mut reports = Vec::with_capacity(config.blocks.len());
    for (b_idx, &block) in config.blocks.iter().enumerate() {
        let mut fdrs = (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = block_rng(config.seed, (b_idx as u64) << 32 | r as u64);
                replicate_fdr(panel, truth, topology, block, config, &mut rng)
            })
            .collect::<Result<Vec<f64>>>()?;
        let fdr_mean = fdrs.iter().sum::<f64>() / fdrs.len() as f64;
        sort_f64(&mut fdrs);
        let fdr_q95 = quantile_sorted(&fdrs, 0.95);
        let rho = rho_block(panel, topology, block, config.replicates, config.seed ^ b_idx as u64)?;
        reports.push(BlockReport {
            time_block: block.time_block,
            space_hops: block.space_hops,
            rho_block: rho,
            fdr_mean,
            fdr_q95,
            within_target: fdr_q95 <= config.alpha,
        });
    }
    Ok(DependenceReport {
        procedure: config.procedure,
        alpha: config.alpha,
        replicates: config.replicates,
        seed: config.seed,
        blocks: reports,
    })
}
