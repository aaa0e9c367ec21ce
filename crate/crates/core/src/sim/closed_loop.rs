//! Closed-loop evaluation of the full stack on the grid simulator.
//!
//! Per step: forecast every cell, build conformal intervals, update the
//! adaptive levels, score residuals into p-values, run the step-up
//! procedure, aggregate to intersections, assemble the control state, act,
//! optionally explore, optionally filter through the Lyapunov check, step
//! the simulator and score the reward.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregate_mean, aggregate_pvalues, aggregate_variance, assemble_state, cyclic_clock, propagate_flags, CovarianceModel,
    PValueRule, StateLayout, DEFAULT_LENGTH_SCALE_KM,
};
use crate::conformal::CalibrationLedger;
use crate::control::{
    anomaly_reward, ensemble_predict, exploration_noise_scale, exploration_prob, fit_world_ensemble, iterative_certificate,
    lyapunov_decrease_rate, project_safe_action, CertificateConfig, ClosedLoop, ConstraintSpec, ControlEnv,
    ExpectationMode, ExplorationMode, ExplorationParams, LyapunovParams, Policy, ProjectionConfig, RewardWeights,
    SafetyCertificate, SafetyContext, StateConstraint, StateDomain, TrafficConstraint, Transition, WorldModelEnsemble,
    DEFAULT_DELTA_SLACK, DEFAULT_EPS_FLOOR, DEFAULT_KAPPA, DEFAULT_MEMBERS,
};
use crate::error::{Error, Result};
use crate::forecaster::HetFitConfig;
use crate::io::{fmt_f64, write_csv_rows};
use crate::sim::config::{AnomalySchedule, SimConfig};
use crate::sim::dataset::{Dataset, SplitIndices, SplitSpec};
use crate::sim::detect::{fit_calibration, CalibrationArtifact, DetectorConfig, FEATURE_DIM};
use crate::sim::env::{queue_pressure_split, GridGeometry, SimState, TrafficSim, LOCAL_FEATURES};

/// Scales of `[q_ns, q_ew, wait, throughput_ratio]` used by the Lyapunov
/// weighting and the model-spread summary.
pub const FEATURE_SCALES: [f64; LOCAL_FEATURES] = [50.0, 50.0, 120.0, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Green share proportional to the north-south queue share.
    #[default]
    QueuePressure,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosedLoopConfig {
    pub sim: SimConfig,
    pub detector: DetectorConfig,
    pub warmup_steps: usize,
    /// Warm-up starts at this time of day, seconds.
    pub warmup_start_seconds: f64,
    /// Share of warm-up steps driven by uniform random actions.
    pub warmup_random_share: f64,
    pub episodes: usize,
    pub episode_steps: usize,
    /// Episodes start at this time of day, seconds.
    pub episode_start_seconds: f64,
    /// Uncontrolled steps before each episode.
    pub preroll_steps: usize,
    pub policy: PolicyKind,
    pub filter: bool,
    pub constraint: ConstraintSpec,
    pub kappa: f64,
    pub delta_slack: f64,
    pub expectation: ExpectationMode,
    pub projection_iterations: usize,
    pub projection_step: f64,
    pub projection_penalty: f64,
    pub exploration: ExplorationParams,
    pub reward: RewardWeights,
    pub ensemble_members: usize,
    pub holdout_fraction: f64,
    pub kernel_length_scale_km: f64,
    pub pvalue_rule: PValueRule,
    pub max_certificate_rounds: usize,
    pub seed: u64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        let sim = SimConfig {
            step_seconds: 15.0,
            base_arrival_per_s: 0.25,
            flow_smoothing: 0.2,
            sensor_noise: 20.0,
            anomaly: AnomalySchedule {
                duration_steps: 40,
                ..Default::default()
            },
            ..Default::default()
        };
        Self {
            sim,
            detector: DetectorConfig {
                het: HetFitConfig {
                    iterations: 500,
                    ..Default::default()
                },
                ..Default::default()
            },
            warmup_steps: 2400,
            warmup_start_seconds: 6.0 * 3600.0,
            warmup_random_share: 0.3,
            episodes: 5,
            episode_steps: 240,
            episode_start_seconds: 7.0 * 3600.0,
            preroll_steps: 120,
            policy: PolicyKind::QueuePressure,
            filter: true,
            constraint: ConstraintSpec::default(),
            kappa: DEFAULT_KAPPA,
            delta_slack: DEFAULT_DELTA_SLACK,
            expectation: ExpectationMode::MeanPrediction,
            projection_iterations: 20,
            projection_step: 0.5,
            // The linear wait model favours the heavier axis everywhere, so a
            // violation penalty starves the lighter one.
            projection_penalty: 0.0,
            exploration: ExplorationParams::default(),
            reward: RewardWeights::default(),
            ensemble_members: DEFAULT_MEMBERS,
            holdout_fraction: 0.2,
            kernel_length_scale_km: DEFAULT_LENGTH_SCALE_KM,
            pvalue_rule: PValueRule::Min,
            max_certificate_rounds: 3,
            seed: 0,
        }
    }
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.constraint.validate()?;
        if self.episodes == 0 || self.episode_steps == 0 {
            return Err(Error::invalid("episodes and episode_steps must be positive"));
        }
        if self.preroll_steps < 3 {
            return Err(Error::invalid("preroll_steps must be at least 3 to seed the forecaster lags"));
        }
        if !(0.0..=1.0).contains(&self.warmup_random_share) {
            return Err(Error::invalid("warmup_random_share must lie in [0, 1]"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction must lie in (0, 1)"));
        }
        if !(self.kappa >= 0.0 && self.delta_slack >= 0.0) {
            return Err(Error::invalid("kappa and delta_slack must be nonnegative"));
        }
        if !(self.kernel_length_scale_km > 0.0) {
            return Err(Error::invalid("kernel length scale must be positive"));
        }
        Ok(())
    }

    fn episode_sim(&self, seed: u64, day: usize) -> SimConfig {
        let lead = self.preroll_steps as f64 * self.sim.step_seconds;
        SimConfig {
            seed,
            start_seconds: (self.episode_start_seconds - lead).max(0.0),
            start_day: day,
            ..self.sim.clone()
        }
    }
}

/// Fitted pieces shared by every episode.
pub struct ClosedLoopComponents {
    pub config: ClosedLoopConfig,
    pub geometry: GridGeometry,
    pub artifact: CalibrationArtifact,
    pub ensemble: WorldModelEnsemble,
    pub lyapunov: LyapunovParams,
    pub constraint: TrafficConstraint,
    pub holdout: Vec<Transition>,
    pub domain: StateDomain,
    pub layout: StateLayout,
    pub covariance: CovarianceModel,
}

fn traffic_constraint(spec: ConstraintSpec, intersections: usize) -> TrafficConstraint {
    TrafficConstraint {
        spec,
        intersections,
        local_features: LOCAL_FEATURES,
        queue_offsets: vec![0, 1],
        wait_offset: 2,
        throughput_offset: 3,
    }
}

/// Quadratic Lyapunov candidate: mean over intersections of squared scaled
/// distance from empty queues, zero wait and full throughput.
pub fn traffic_lyapunov(intersections: usize) -> Result<LyapunovParams> {
    let d = intersections * LOCAL_FEATURES;
    let q = DMatrix::from_fn(d, d, |i, k| {
        if i == k {
            1.0 / (FEATURE_SCALES[i % LOCAL_FEATURES].powi(2) * intersections as f64)
        } else {
            0.0
        }
    });
    let s_safe = DVector::from_fn(d, |i, _| if i % LOCAL_FEATURES == 3 { 1.0 } else { 0.0 });
    LyapunovParams::new(DMatrix::zeros(1, d), 1.0, q, s_safe)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform_action(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Warm-up run, detector calibration and world-model fit.
pub fn prepare_components(config: &ClosedLoopConfig) -> Result<ClosedLoopComponents> {
    config.validate()?;
    let warm_cfg = SimConfig {
        seed: config.seed,
        start_seconds: config.warmup_start_seconds,
        start_day: 0,
        ..config.sim.clone()
    };
    let geometry = GridGeometry::new(&warm_cfg)?;
    let mut sim = TrafficSim::with_geometry(warm_cfg.clone(), geometry.clone());
    let m = sim.intersection_count();
    let mut rng = stream(config.seed, 10);
    let steps = config.warmup_steps;
    let mut flows = Vec::with_capacity(steps);
    let mut mask = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    states.push(sim.state.local_features());
    for _ in 0..steps {
        let random = rng.random::<f64>() < config.warmup_random_share;
        let proposal = uniform_action(&mut rng, m);
        let a = if random { proposal } else { queue_pressure_split(&sim.state) };
        let rec = sim.step(&a)?;
        flows.push(sim.state.cell_flow.clone());
        mask.push(rec.mask);
        states.push(sim.state.local_features());
        actions.push(a);
    }
    let split = SplitIndices::new(steps, &SplitSpec::default())?;
    let dataset = Dataset {
        config: warm_cfg,
        flows,
        mask,
        split,
    };
    let artifact = fit_calibration(&dataset, &geometry.cell_topology, &config.detector)?;

    // Skip the first steps while queues fill from empty.
    let burn = (steps / 20).max(1);
    let transitions: Vec<Transition> = (burn..steps)
        .map(|t| Transition {
            state: states[t].clone(),
            action: actions[t].clone(),
            next_state: states[t + 1].clone(),
        })
        .collect();
    let cut = ((1.0 - config.holdout_fraction) * transitions.len() as f64).round() as usize;
    if cut < 2 || cut >= transitions.len() {
        return Err(Error::InsufficientData(format!("{} warm-up transitions cannot be split for fitting and holdout", transitions.len())));
    }
    let ensemble = fit_world_ensemble(&transitions[..cut], config.ensemble_members, config.seed)?;
    let holdout = transitions[cut..].to_vec();
    let dim = m * LOCAL_FEATURES;
    let center: Vec<f64> = (0..dim)
        .map(|k| states[burn..].iter().map(|s| s[k]).sum::<f64>() / (states.len() - burn) as f64)
        .collect();
    let radius = states[burn..]
        .iter()
        .map(|s| s.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        * 1.1;
    let components = ClosedLoopComponents {
        config: config.clone(),
        lyapunov: traffic_lyapunov(m)?,
        constraint: traffic_constraint(config.constraint, m),
        layout: StateLayout::new(m, LOCAL_FEATURES),
        covariance: CovarianceModel::DistanceKernel {
            length_scale_km: config.kernel_length_scale_km,
        },
        geometry,
        artifact,
        ensemble,
        holdout,
        domain: StateDomain { center, radius },
    };
    components.check_wiring()?;
    Ok(components)
}

impl ClosedLoopComponents {
    /// Dimension agreement between every stage.
    pub fn check_wiring(&self) -> Result<()> {
        let cells = self.geometry.coverage.cell_count();
        let m = self.geometry.coverage.intersection_count();
        let local = self.layout.local_dim();
        let checks = [
            ("ledger nodes", cells, self.artifact.ledger.labels.len()),
            ("predictor features", FEATURE_DIM, self.artifact.predictor.input_dim()),
            ("layout intersections", m, self.layout.intersections),
            ("world-model state", local, self.ensemble.state_dim()),
            ("world-model action", m, self.ensemble.action_dim()),
            ("Lyapunov state", local, self.lyapunov.dim()),
            ("constraint intersections", m, self.constraint.intersections),
            ("certificate domain", local, self.domain.center.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::dim(what, expected, got));
            }
        }
        Ok(())
    }

    pub fn safety_context(&self) -> SafetyContext<'_> {
        SafetyContext {
            ensemble: &self.ensemble,
            lyapunov: &self.lyapunov,
            constraint: &self.constraint,
            kappa: self.config.kappa,
            delta_slack: self.config.delta_slack,
            mode: self.config.expectation,
        }
    }

    pub fn projection(&self) -> ProjectionConfig {
        let m = self.layout.intersections;
        ProjectionConfig {
            iterations: self.config.projection_iterations,
            step_size: self.config.projection_step,
            penalty: self.config.projection_penalty,
            ..ProjectionConfig::new(vec![0.0; m], vec![1.0; m])
        }
    }

    /// Episode seed for `(seed, episode)`.
    fn episode_seed(seed: u64, episode: usize) -> u64 {
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode as u64)
    }
}

/// Intersection-level view of the detector output at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: Vec<f64>,
    pub local: Vec<f64>,
    pub p_mean: f64,
    /// Mean coefficient of variation of the cell forecasts.
    pub sigma_forecast: f64,
    pub flagged_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: usize,
    /// Local measurements before the action.
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    /// Violation of the state reached by the action.
    pub d_c: f64,
    /// Lyapunov value of the state reached by the action.
    pub lyapunov: f64,
    pub explored: bool,
    pub projected: bool,
    pub unresolved: bool,
}

/// One episode of the closed loop, advanced a step at a time.
pub struct EpisodeRunner<'a> {
    comp: &'a ClosedLoopComponents,
    sim: TrafficSim,
    ledger: CalibrationLedger,
    lag2: Vec<f64>,
    lag1: Vec<f64>,
    current: Observation,
    rng: ChaCha8Rng,
    policy: PolicyKind,
    filter: bool,
    t: usize,
}

impl<'a> EpisodeRunner<'a> {
    pub fn new(comp: &'a ClosedLoopComponents, policy: PolicyKind, filter: bool, seed: u64, episode: usize) -> Result<Self> {
        let cfg = &comp.config;
        let ep_seed = ClosedLoopComponents::episode_seed(seed, episode);
        let mut sim = TrafficSim::with_geometry(cfg.episode_sim(ep_seed, episode % 5), comp.geometry.clone());
        let mut rows = Vec::with_capacity(cfg.preroll_steps);
        for _ in 0..cfg.preroll_steps {
            let g = queue_pressure_split(&sim.state);
            sim.step(&g)?;
            rows.push(sim.state.cell_flow.clone());
        }
        let n = rows.len();
        let mut runner = Self {
            comp,
            ledger: comp.artifact.ledger.clone(),
            lag2: rows[n - 3].clone(),
            lag1: rows[n - 2].clone(),
            current: Observation {
                state: Vec::new(),
                local: Vec::new(),
                p_mean: 1.0,
                sigma_forecast: 0.0,
                flagged_cells: 0,
            },
            rng: stream(ep_seed, 20),
            policy,
            filter,
            t: 0,
            sim,
        };
        let y = rows[n - 1].clone();
        runner.current = runner.observe(y)?;
        Ok(runner)
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    pub fn sim_state(&self) -> &SimState {
        &self.sim.state
    }

    /// Detector pass on the newest row `y`; shifts the lag buffer.
    fn observe(&mut self, y: Vec<f64>) -> Result<Observation> {
        let comp = self.comp;
        let topo = &comp.geometry.cell_topology;
        let step = self.sim.state.t;
        let (sod, dow) = self.sim.config.clock(step.saturating_sub(1));
        let det = comp.artifact.detect_step(&self.ledger, (&self.lag1, &self.lag2), &y, topo, sod)?;
        // Adaptive levels: one representative node per cluster per step.
        for k in 0..self.ledger.clusters.len() {
            let members: Vec<usize> = (0..self.ledger.labels.len()).filter(|&i| self.ledger.labels[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let node = members[step % members.len()];
            self.ledger.record_outcome(k, !det.intervals.contains(node, 0, y[node]))?;
        }
        let map = &comp.geometry.coverage;
        let coords = map.cell_centers();
        let mu_int = aggregate_mean(&det.mu, map)?;
        let sigma_int = aggregate_variance(&det.sigma, map, &comp.covariance, &coords)?;
        let p_int = aggregate_pvalues(&det.pvalues, map, comp.config.pvalue_rule)?;
        let flags = propagate_flags(&det.rejected, map)?;
        let local = self.sim.state.local_features();
        let p_mean = p_int.iter().sum::<f64>() / p_int.len() as f64;
        let state = assemble_state(comp.layout, local.clone(), mu_int, sigma_int, p_int, flags, cyclic_clock(sod, dow))?;
        let sigma_forecast =
            det.sigma.iter().zip(&det.mu).map(|(s, m)| s / (m.abs() + 1.0)).sum::<f64>() / det.sigma.len() as f64;
        self.lag2 = std::mem::replace(&mut self.lag1, y);
        Ok(Observation {
            state: state.to_vector(),
            local,
            p_mean,
            sigma_forecast,
            flagged_cells: det.rejected.iter().filter(|&&r| r).count(),
        })
    }

    fn model_spread(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let (_, var) = ensemble_predict(&self.comp.ensemble, s, a)?;
        Ok(var
            .iter()
            .enumerate()
            .map(|(k, v)| v.sqrt() / FEATURE_SCALES[k % LOCAL_FEATURES])
            .sum::<f64>()
            / var.len().max(1) as f64)
    }

    /// Act on the current observation, advance the simulator and observe.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let comp = self.comp;
        let m = comp.layout.intersections;
        let obs = self.current.clone();
        let s = &obs.local;
        let proposal = uniform_action(&mut self.rng, m);
        let mut a = match self.policy {
            PolicyKind::QueuePressure => queue_pressure_split(&self.sim.state),
            PolicyKind::Random => proposal.clone(),
        };
        let sigma_w = self.model_spread(s, &a)?;
        let ex = &comp.config.exploration;
        let mut explored = false;
        match ex.mode {
            ExplorationMode::SigmoidProbability => {
                let eps = exploration_prob(obs.sigma_forecast, 1.0 - obs.p_mean, sigma_w, ex);
                // Drawn every step so paired runs consume the generator identically.
                let coin = self.rng.random::<f64>();
                let replacement = uniform_action(&mut self.rng, m);
                if coin < eps {
                    a = replacement;
                    explored = true;
                }
            }
            ExplorationMode::GaussianNoise => {
                let scale = exploration_noise_scale(obs.sigma_forecast, ex);
                for x in a.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    *x = (*x + scale * z).clamp(0.0, 1.0);
                }
                explored = scale > 0.0;
            }
        }
        let (mut projected, mut unresolved) = (false, false);
        if self.filter {
            let r = project_safe_action(s, &a, &comp.safety_context(), &comp.projection())?;
            projected = r.projected;
            unresolved = r.projected && !r.check.safe;
            a = r.action;
        }
        self.sim.step(&a)?;
        self.t += 1;
        let y = self.sim.state.cell_flow.clone();
        let next = self.observe(y)?;
        let d_c = comp.constraint.violation(&next.local);
        let queue = comp.constraint.metrics(&next.local).mean_queue;
        let r_traffic = -queue / comp.config.constraint.d_queue;
        let reward = anomaly_reward(r_traffic, obs.p_mean, next.p_mean, obs.sigma_forecast, d_c, &comp.config.reward)?;
        let lyapunov = comp.lyapunov.value(&next.local);
        self.current = next;
        Ok(StepOutcome {
            t: self.t - 1,
            state: obs.local,
            action: a,
            reward,
            d_c,
            lyapunov,
            explored,
            projected,
            unresolved,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub violations: usize,
    pub mean_reward: f64,
    pub rho_lyap: f64,
    pub projected: usize,
    pub unresolved: usize,
    pub explored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub policy: PolicyKind,
    pub filter: bool,
    /// Percentage of episodes with zero violating steps.
    pub safety_pct: f64,
    pub violations_per_episode: f64,
    pub rho_lyap: f64,
    pub mean_reward: f64,
    pub episodes: Vec<EpisodeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub seed: u64,
    pub episode: usize,
    pub outcome: StepOutcome,
}

/// All configured episodes for one seed.
pub fn run_closed_loop(comp: &ClosedLoopComponents, policy: PolicyKind, filter: bool, seed: u64) -> Result<(Vec<TrajectoryRow>, RunMetrics)> {
    comp.check_wiring()?;
    let cfg = &comp.config;
    let mut rows = Vec::with_capacity(cfg.episodes * cfg.episode_steps);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let mut runner = EpisodeRunner::new(comp, policy, filter, seed, e)?;
        let mut values = vec![comp.lyapunov.value(&runner.observation().local)];
        let mut m = EpisodeMetrics {
            episode: e,
            violations: 0,
            mean_reward: 0.0,
            rho_lyap: 0.0,
            projected: 0,
            unresolved: 0,
            explored: 0,
        };
        for _ in 0..cfg.episode_steps {
            let out = runner.step()?;
            m.violations += usize::from(out.d_c > 0.0);
            m.mean_reward += out.reward;
            m.projected += usize::from(out.projected);
            m.unresolved += usize::from(out.unresolved);
            m.explored += usize::from(out.explored);
            values.push(out.lyapunov);
            rows.push(TrajectoryRow { seed, episode: e, outcome: out });
        }
        m.mean_reward /= cfg.episode_steps as f64;
        m.rho_lyap = lyapunov_decrease_rate(&values)?;
        episodes.push(m);
    }
    let n = episodes.len() as f64;
    let metrics = RunMetrics {
        seed,
        policy,
        filter,
        safety_pct: 100.0 * episodes.iter().filter(|e| e.violations == 0).count() as f64 / n,
        violations_per_episode: episodes.iter().map(|e| e.violations as f64).sum::<f64>() / n,
        rho_lyap: episodes.iter().map(|e| e.rho_lyap).sum::<f64>() / n,
        mean_reward: episodes.iter().map(|e| e.mean_reward).sum::<f64>() / n,
        episodes,
    };
    Ok((rows, metrics))
}

/// Mean and normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
}

impl MeanCi {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n.max(1.0);
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            ci95: 1.96 * (var / n.max(1.0)).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub filter: bool,
    pub seeds: Vec<u64>,
    pub mean_reward: MeanCi,
    pub violations_per_episode: MeanCi,
    pub safety_pct: MeanCi,
    pub rho_lyap: MeanCi,
    pub runs: Vec<RunMetrics>,
}

pub fn summarize_runs(runs: Vec<RunMetrics>) -> Result<RunSummary> {
    let first = runs.first().ok_or_else(|| Error::InsufficientData("no runs to summarise".into()))?;
    let col = |f: fn(&RunMetrics) -> f64| MeanCi::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RunSummary {
        policy: first.policy,
        filter: first.filter,
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_reward: col(|r| r.mean_reward),
        violations_per_episode: col(|r| r.violations_per_episode),
        safety_pct: col(|r| r.safety_pct),
        rho_lyap: col(|r| r.rho_lyap),
        runs,
    })
}

/// Independent seeds in parallel; rows and runs come back in seed order.
pub fn run_seeds(comp: &ClosedLoopComponents, policy: PolicyKind, filter: bool, seeds: &[u64]) -> Result<(Vec<TrajectoryRow>, RunSummary)> {
    let runs = seeds
        .par_iter()
        .map(|&seed| run_closed_loop(comp, policy, filter, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut metrics = Vec::with_capacity(runs.len());
    for (r, m) in runs {
        rows.extend(r);
        metrics.push(m);
    }
    Ok((rows, summarize_runs(metrics)?))
}

/// `seed,episode,t,s0..,a0..,reward,d_c,lyapunov`.
pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let (ds, da) = rows
        .first()
        .map_or((0, 0), |r| (r.outcome.state.len(), r.outcome.action.len()));
    let mut header: Vec<String> = vec!["seed".into(), "episode".into(), "t".into()];
    header.extend((0..ds).map(|k| format!("s{k}")));
    header.extend((0..da).map(|k| format!("a{k}")));
    header.extend(["reward", "d_c", "lyapunov"].map(String::from));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let body = rows.iter().map(|r| {
        let o = &r.outcome;
        let mut v = vec![r.seed.to_string(), r.episode.to_string(), o.t.to_string()];
        v.extend(o.state.iter().map(|x| fmt_f64(*x)));
        v.extend(o.action.iter().map(|x| fmt_f64(*x)));
        v.extend([fmt_f64(o.reward), fmt_f64(o.d_c), fmt_f64(o.lyapunov)]);
        v
    });
    write_csv_rows(path, &header_refs, body)
}

/// Simulator seen through local measurements, for rollouts and certificates.
pub struct TrafficControlEnv<'a> {
    comp: &'a ClosedLoopComponents,
    sim: Option<TrafficSim>,
}

impl<'a> TrafficControlEnv<'a> {
    pub fn new(comp: &'a ClosedLoopComponents) -> Self {
        Self { comp, sim: None }
    }
}

impl ControlEnv for TrafficControlEnv<'_> {
    fn state_dim(&self) -> usize {
        self.comp.layout.local_dim()
    }

    fn action_dim(&self) -> usize {
        self.comp.layout.intersections
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.action_dim();
        (vec![0.0; m], vec![1.0; m])
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let cfg = &self.comp.config;
        let mut sim = TrafficSim::with_geometry(cfg.episode_sim(seed, (seed % 5) as usize), self.comp.geometry.clone());
        for _ in 0..cfg.preroll_steps {
            let g = queue_pressure_split(&sim.state);
            sim.step(&g).expect("queue-pressure split lies in [0, 1]");
        }
        let s = sim.state.local_features();
        self.sim = Some(sim);
        s
    }

    fn step(&mut self, action: &[f64]) -> Vec<f64> {
        let sim = self.sim.as_mut().expect("reset before step");
        let a: Vec<f64> = action.iter().map(|x| x.clamp(0.0, 1.0)).collect();
        sim.step(&a).expect("action clamped to [0, 1]");
        sim.state.local_features()
    }
}

/// Queue-pressure heuristic acting on local measurements.
pub struct QueuePressurePolicy;

impl Policy for QueuePressurePolicy {
    fn act(&mut self, state: &[f64], _rng: &mut ChaCha8Rng) -> Vec<f64> {
        state
            .chunks(LOCAL_FEATURES)
            .map(|c| if c[0] + c[1] > 0.0 { c[0] / (c[0] + c[1]) } else { 0.5 })
            .collect()
    }
}

/// Iterative certificate for the filtered queue-pressure policy.
pub fn certify_traffic(comp: &ClosedLoopComponents, seed: u64) -> Result<SafetyCertificate> {
    let cl = ClosedLoop {
        ctx: comp.safety_context(),
        projection: comp.projection(),
        exploration: comp.config.exploration,
        filter: true,
    };
    let cfg = CertificateConfig {
        max_rounds: comp.config.max_certificate_rounds,
        rollout_steps: comp.config.episode_steps,
        eps_floor: DEFAULT_EPS_FLOOR,
        ..CertificateConfig::new(comp.domain.clone())
    };
    let mut env = TrafficControlEnv::new(comp);
    iterative_certificate(&mut env, &mut QueuePressurePolicy, &cl, &comp.holdout, &cfg, seed)
}
