//! Filtered closed-loop rollouts and the iterative model-error certificate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::constraints::BoxConstraint;
use crate::control::exploration::{exploration_noise_scale, exploration_prob, ExplorationMode, ExplorationParams};
use crate::control::lyapunov::{
    epsilon_star, epsilon_star_scaled, lipschitz_bounds, project_safe_action, ExpectationMode, LyapunovParams, ProjectionConfig,
    SafetyContext, StateDomain, DEFAULT_DELTA_SLACK, DEFAULT_KAPPA,
};
use crate::control::world::{
    ensemble_predict, fit_world_ensemble, model_error, AffineModel, Transition, WorldModelEnsemble, DEFAULT_EPS_FLOOR, DEFAULT_MEMBERS,
};
use crate::error::{Error, Result};

pub trait ControlEnv {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Vec<f64>;
}

pub trait Policy {
    fn act(&mut self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;
}

/// Everything a rollout needs besides the environment and policy.
#[derive(Clone)]
pub struct ClosedLoop<'a> {
    pub ctx: SafetyContext<'a>,
    pub projection: ProjectionConfig,
    pub exploration: ExplorationParams,
    pub filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `steps + 1` states.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Constraint violation of each state.
    pub d_c: Vec<f64>,
    pub lyapunov: Vec<f64>,
    pub projected: usize,
    /// Projected actions that still failed the check.
    pub unresolved: usize,
}

impl Rollout {
    pub fn transitions(&self) -> Vec<Transition> {
        self.actions
            .iter()
            .enumerate()
            .map(|(t, a)| Transition {
                state: self.states[t].clone(),
                action: a.clone(),
                next_state: self.states[t + 1].clone(),
            })
            .collect()
    }

    pub fn violating_steps(&self) -> usize {
        self.d_c.iter().filter(|&&d| d > 0.0).count()
    }

    /// Mean of `d_C` over the final `window` states.
    pub fn tail_mean_violation(&self, window: usize) -> f64 {
        let w = window.min(self.d_c.len()).max(1);
        self.d_c[self.d_c.len() - w..].iter().sum::<f64>() / w as f64
    }
}

/// Policy action, optional exploration, optional Lyapunov filter.
pub fn rollout<E: ControlEnv, P: Policy>(env: &mut E, policy: &mut P, cl: &ClosedLoop<'_>, steps: usize, seed: u64) -> Result<Rollout> {
    let (lo, hi) = env.action_bounds();
    let da = env.action_dim();
    if cl.ctx.ensemble.state_dim() != env.state_dim() || cl.ctx.ensemble.action_dim() != da {
        return Err(Error::dim("closed-loop wiring", env.state_dim() + da, cl.ctx.ensemble.state_dim() + cl.ctx.ensemble.action_dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = env.reset(seed);
    let mut out = Rollout {
        states: vec![s.clone()],
        actions: Vec::with_capacity(steps),
        d_c: vec![cl.ctx.constraint.violation(&s)],
        lyapunov: vec![cl.ctx.lyapunov.value(&s)],
        projected: 0,
        unresolved: 0,
    };
    for _ in 0..steps {
        let mut a = policy.act(&s, &mut rng);
        let (_, var) = ensemble_predict(cl.ctx.ensemble, &s, &a)?;
        let sigma_w = var.iter().map(|v| v.sqrt()).sum::<f64>() / var.len().max(1) as f64;
        match cl.exploration.mode {
            ExplorationMode::SigmoidProbability => {
                let eps = exploration_prob(0.0, 1.0, sigma_w, &cl.exploration);
                // Draws happen unconditionally so filtered and unfiltered runs
                // consume the generator identically.
                let explore = rng.random::<f64>() < eps;
                let proposal: Vec<f64> = (0..da).map(|k| rng.random_range(lo[k]..=hi[k])).collect();
                if explore {
                    a = proposal;
                }
            }
            ExplorationMode::GaussianNoise => {
                let scale = exploration_noise_scale(sigma_w, &cl.exploration);
                for x in a.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += scale * z;
                }
            }
        }
        for k in 0..da {
            a[k] = a[k].clamp(lo[k], hi[k]);
        }
        if cl.filter {
            let r = project_safe_action(&s, &a, &cl.ctx, &cl.projection)?;
            if r.projected {
                out.projected += 1;
                if !r.check.safe {
                    out.unresolved += 1;
                }
            }
            a = r.action;
        }
        s = env.step(&a);
        out.actions.push(a);
        out.d_c.push(cl.ctx.constraint.violation(&s));
        out.lyapunov.push(cl.ctx.lyapunov.value(&s));
        out.states.push(s.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRound {
    pub round: usize,
    pub d_bar_c: f64,
    pub epsilon_model: f64,
    pub epsilon_star: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyCertificate {
    pub epsilon_model: f64,
    pub l_bar: f64,
    pub j_bar: f64,
    pub delta_slack: f64,
    pub kappa: f64,
    pub d_bar_c: f64,
    pub epsilon_star: f64,
    /// Mean state norm of the last rollout, used by the scaled variant.
    pub s_bar: f64,
    pub epsilon_star_scaled: f64,
    pub verdict: Verdict,
    pub rounds: Vec<CertificateRound>,
}

impl SafetyCertificate {
    /// Recompute the threshold from the stored fields.
    pub fn recomputed_epsilon_star(&self) -> Result<f64> {
        epsilon_star(self.delta_slack, self.kappa, self.d_bar_c, self.l_bar, self.j_bar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateConfig {
    pub d_bar_init: f64,
    pub max_rounds: usize,
    pub rollout_steps: usize,
    pub eps_floor: f64,
    pub domain: StateDomain,
}

impl CertificateConfig {
    pub fn new(domain: StateDomain) -> Self {
        Self {
            d_bar_init: 1.0,
            max_rounds: 3,
            rollout_steps: 1000,
            eps_floor: DEFAULT_EPS_FLOOR,
            domain,
        }
    }
}

/// Round 1 uses `d_bar_init` and the supplied holdout. Each later round
/// rolls out the filtered policy, re-measures `d_bar_C` and the model
/// error on the fresh transitions, and recomputes the threshold. The loop
/// stops once two consecutive rounds agree; otherwise the verdict is
/// undetermined.
pub fn iterative_certificate<E: ControlEnv, P: Policy>(
    env: &mut E,
    policy: &mut P,
    cl: &ClosedLoop<'_>,
    holdout: &[Transition],
    cfg: &CertificateConfig,
    seed: u64,
) -> Result<SafetyCertificate> {
    if cfg.max_rounds == 0 {
        return Err(Error::invalid("certificate needs at least one round"));
    }
    let ctx = &cl.ctx;
    let (l_bar, j_bar) = lipschitz_bounds(ctx.lyapunov, ctx.ensemble, &cfg.domain)?;
    let mut d_bar = cfg.d_bar_init;
    let mut eps_model = model_error(ctx.ensemble, holdout, cfg.eps_floor)?;
    let mut s_bar = holdout.iter().map(|t| DVector::from_column_slice(&t.state).norm()).sum::<f64>() / holdout.len() as f64;
    let mut rounds: Vec<CertificateRound> = Vec::new();
    let mut verdict = Verdict::Undetermined;
    for round in 1..=cfg.max_rounds {
        if round > 1 {
            let r = rollout(env, policy, cl, cfg.rollout_steps, seed.wrapping_add(round as u64))?;
            d_bar = r.d_c.iter().sum::<f64>() / r.d_c.len() as f64;
            eps_model = model_error(ctx.ensemble, &r.transitions(), cfg.eps_floor)?;
            s_bar = r.states.iter().map(|s| DVector::from_column_slice(s).norm()).sum::<f64>() / r.states.len() as f64;
        }
        let eps_star = epsilon_star(ctx.delta_slack, ctx.kappa, d_bar, l_bar, j_bar)?;
        let pass = eps_model < eps_star;
        log::info!("certificate round {round}: d_bar={d_bar:.4} eps_model={eps_model:.5} eps*={eps_star:.5} pass={pass}");
        let stable = rounds.last().is_some_and(|prev| prev.pass == pass);
        rounds.push(CertificateRound {
            round,
            d_bar_c: d_bar,
            epsilon_model: eps_model,
            epsilon_star: eps_star,
            pass,
        });
        if stable {
            verdict = if pass { Verdict::Pass } else { Verdict::Fail };
            break;
        }
    }
    let last = rounds.last().expect("at least one round");
    let scaled = if s_bar > 0.0 {
        epsilon_star_scaled(ctx.delta_slack, ctx.kappa, last.d_bar_c, l_bar, j_bar, s_bar)?
    } else {
        f64::INFINITY
    };
    Ok(SafetyCertificate {
        epsilon_model: last.epsilon_model,
        l_bar,
        j_bar,
        delta_slack: ctx.delta_slack,
        kappa: ctx.kappa,
        d_bar_c: last.d_bar_c,
        epsilon_star: last.epsilon_star,
        s_bar,
        epsilon_star_scaled: scaled,
        verdict,
        rounds,
    })
}

/// `s' = A s + B a + noise_rel ||s|| xi`, actions boxed to `[-bound, bound]`.
#[derive(Debug, Clone)]
pub struct LinearToyEnv {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise_rel: f64,
    pub action_bound: f64,
    pub initial: Vec<f64>,
    state: DVector<f64>,
    rng: ChaCha8Rng,
}

impl LinearToyEnv {
    /// Mildly unstable 2-D system started outside the unit box.
    pub fn unstable_2d() -> Self {
        Self::new(
            DMatrix::from_row_slice(2, 2, &[1.06, 0.1, 0.0, 1.04]),
            DMatrix::identity(2, 2),
            5e-4,
            0.5,
            vec![1.4, -1.3],
        )
    }

    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, noise_rel: f64, action_bound: f64, initial: Vec<f64>) -> Self {
        let d = a.nrows();
        Self {
            a,
            b,
            noise_rel,
            action_bound,
            initial,
            state: DVector::zeros(d),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl ControlEnv for LinearToyEnv {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.action_bound; self.action_dim()], vec![self.action_bound; self.action_dim()])
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed0_fe4f);
        let jitter = Normal::new(0.0, 0.05).expect("valid normal");
        self.state = DVector::from_iterator(self.initial.len(), self.initial.iter().map(|x| x + jitter.sample(&mut self.rng)));
        self.state.as_slice().to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Vec<f64> {
        let scale = self.noise_rel * self.state.norm();
        let noise = DVector::from_fn(self.state.len(), |_, _| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            scale * z
        });
        self.state = &self.a * &self.state + &self.b * DVector::from_column_slice(action) + noise;
        self.state.as_slice().to_vec()
    }
}

/// Linear feedback `a = -K s`.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    pub gain: DMatrix<f64>,
}

impl Policy for LinearPolicy {
    fn act(&mut self, state: &[f64], _rng: &mut ChaCha8Rng) -> Vec<f64> {
        (-(&self.gain * DVector::from_column_slice(state))).as_slice().to_vec()
    }
}

/// Uniform actions inside a box.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Policy for UniformPolicy {
    fn act(&mut self, _state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect()
    }
}

impl LinearToyEnv {
    /// Feedback placing the closed-loop matrix at `0.7 I` for identity `B`.
    pub fn stabilizer(&self) -> LinearPolicy {
        LinearPolicy {
            gain: &self.a - DMatrix::identity(self.a.nrows(), self.a.ncols()) * 0.7,
        }
    }
}

/// Unstable 2-D toy system with a fitted 5-member ensemble, a quadratic
/// Lyapunov function and a unit-box constraint.
pub struct ToyFixture {
    pub env: LinearToyEnv,
    pub ensemble: WorldModelEnsemble,
    pub lyapunov: LyapunovParams,
    pub constraint: BoxConstraint,
    pub holdout: Vec<Transition>,
    pub domain: StateDomain,
    pub kappa: f64,
    pub delta_slack: f64,
}

impl ToyFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut env = LinearToyEnv::unstable_2d();
        let domain = StateDomain { center: vec![0.0, 0.0], radius: 2.5 };
        let train = sample_transitions(&mut env, &domain, 400, seed);
        let holdout = sample_transitions(&mut env, &domain, 200, seed + 1000);
        let ensemble = fit_world_ensemble(&train, DEFAULT_MEMBERS, seed)?;
        let features = LyapunovParams::spectrally_normalized(DMatrix::identity(2, 2) * 0.5);
        let lyapunov = LyapunovParams::new(features, 1.0, DMatrix::identity(2, 2), DVector::zeros(2))?;
        Ok(Self {
            env,
            ensemble,
            lyapunov,
            constraint: BoxConstraint { bounds: vec![1.0, 1.0] },
            holdout,
            domain,
            kappa: DEFAULT_KAPPA,
            delta_slack: DEFAULT_DELTA_SLACK,
        })
    }

    /// Noise-free system with the exact model as a one-member ensemble.
    pub fn perfect(seed: u64) -> Result<Self> {
        let mut t = Self::new(seed)?;
        t.env.noise_rel = 0.0;
        let exact = AffineModel::new(t.env.a.clone(), t.env.b.clone(), DVector::zeros(t.env.a.nrows()))?;
        t.ensemble = WorldModelEnsemble::from_members(vec![exact])?;
        t.holdout = sample_transitions(&mut t.env, &t.domain, 50, seed + 2000);
        Ok(t)
    }

    pub fn closed_loop(&self, filter: bool) -> ClosedLoop<'_> {
        let (lo, hi) = self.env.action_bounds();
        ClosedLoop {
            ctx: SafetyContext {
                ensemble: &self.ensemble,
                lyapunov: &self.lyapunov,
                constraint: &self.constraint,
                kappa: self.kappa,
                delta_slack: self.delta_slack,
                mode: ExpectationMode::MeanPrediction,
            },
            projection: ProjectionConfig::new(lo, hi),
            exploration: ExplorationParams::default(),
            filter,
        }
    }

    /// Certificate for the filtered stabilising policy.
    pub fn certify(&self, config: &CertificateConfig, seed: u64) -> Result<SafetyCertificate> {
        let mut env = self.env.clone();
        let mut policy = env.stabilizer();
        iterative_certificate(&mut env, &mut policy, &self.closed_loop(true), &self.holdout, config, seed)
    }
}

/// Exploration transitions for fitting a world model: uniform actions from
/// states drawn in a ball, one step each.
pub fn sample_transitions<E: ControlEnv>(env: &mut E, domain: &StateDomain, n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = env.action_bounds();
    let d = env.state_dim();
    let mut out = Vec::with_capacity(n);
    let mut s = env.reset(seed);
    for t in 0..n {
        if t % 20 == 0 || !domain.contains(&s) {
            s = env.reset(rng.random());
        }
        let a: Vec<f64> = (0..env.action_dim()).map(|k| rng.random_range(lo[k]..=hi[k])).collect();
        let next = env.step(&a);
        out.push(Transition {
            state: s.clone(),
            action: a,
            next_state: next.clone(),
        });
        s = next;
        debug_assert_eq!(s.len(), d);
    }
    out
}
