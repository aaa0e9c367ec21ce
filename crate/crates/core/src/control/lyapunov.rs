//! Lyapunov function, Lipschitz bounds, the model-error threshold and the
//! safe-action filter.
//!
//! `L(s) = ||A s||^2 + eta (s - s_safe)^T Q (s - s_safe)` where `A` is a
//! spectrally normalised linear feature map.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::constraints::StateConstraint;
use crate::control::world::WorldModelEnsemble;
use crate::error::{Error, Result};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_DELTA_SLACK: f64 = 0.05;

/// Largest singular value by power iteration on `M^T M`.
pub fn spectral_norm(m: &DMatrix<f64>, max_iter: usize, tol: f64, seed: u64) -> f64 {
    if m.is_empty() || m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(m.ncols(), |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..max_iter.max(1) {
        let w = m.tr_mul(&(m * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = norm.sqrt();
        let done = (next - est).abs() <= tol * next;
        est = next;
        if done {
            break;
        }
    }
    (m * &v).norm()
}

pub const SPECTRAL_ITERS: usize = 10_000;
pub const SPECTRAL_TOL: f64 = 1e-14;

fn sigma_max(m: &DMatrix<f64>) -> f64 {
    spectral_norm(m, SPECTRAL_ITERS, SPECTRAL_TOL, 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovParams {
    pub features: DMatrix<f64>,
    pub eta: f64,
    pub q: DMatrix<f64>,
    pub s_safe: DVector<f64>,
}

impl LyapunovParams {
    pub fn new(features: DMatrix<f64>, eta: f64, q: DMatrix<f64>, s_safe: DVector<f64>) -> Result<Self> {
        let d = s_safe.len();
        if features.ncols() != d {
            return Err(Error::dim("Lyapunov feature map columns", d, features.ncols()));
        }
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::dim("Lyapunov weighting", d, q.nrows().max(q.ncols())));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be nonnegative, got {eta}")));
        }
        if (&q - q.transpose()).abs().max() > 1e-12 * q.abs().max().max(1.0) {
            return Err(Error::invalid("Lyapunov weighting must be symmetric"));
        }
        if d > 0 && SymmetricEigen::new(q.clone()).eigenvalues.min() <= 0.0 {
            return Err(Error::invalid("Lyapunov weighting must be positive definite"));
        }
        Ok(Self { features, eta, q, s_safe })
    }

    /// Rescale `features` so its largest singular value is at most one.
    pub fn spectrally_normalized(features: DMatrix<f64>) -> DMatrix<f64> {
        let s = sigma_max(&features);
        if s > 1.0 {
            features / s
        } else {
            features
        }
    }

    pub fn dim(&self) -> usize {
        self.s_safe.len()
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        let s = DVector::from_column_slice(s);
        self.value_vec(&s)
    }

    pub fn value_vec(&self, s: &DVector<f64>) -> f64 {
        let f = &self.features * s;
        let d = s - &self.s_safe;
        f.norm_squared() + self.eta * d.dot(&(&self.q * &d))
    }
}

pub fn lyapunov_value(s: &[f64], params: &LyapunovParams) -> Result<f64> {
    if s.len() != params.dim() {
        return Err(Error::dim("Lyapunov state", params.dim(), s.len()));
    }
    Ok(params.value(s))
}

/// Euclidean ball the closed loop is assumed to stay in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDomain {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl StateDomain {
    pub fn contains(&self, s: &[f64]) -> bool {
        s.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= self.radius
    }
}

/// `(L_bar, J_bar)`.
///
/// On a ball `B(c, R)` the gradient `2 A^T A s + 2 eta Q (s - s_safe)` is
/// bounded by `2 ||A|| sup||A s|| + 2 eta ||Q|| sup||s - s_safe||` with
/// `sup||A s|| <= ||A c|| + ||A|| R` and `sup||s - s_safe|| <= ||c - s_safe|| + R`.
/// `J_bar` is the largest member state-Jacobian spectral norm.
pub fn lipschitz_bounds(lyap: &LyapunovParams, ensemble: &WorldModelEnsemble, domain: &StateDomain) -> Result<(f64, f64)> {
    if !domain.radius.is_finite() || domain.radius < 0.0 {
        return Err(Error::invalid(format!("state domain radius {} is not a finite bound", domain.radius)));
    }
    if domain.center.len() != lyap.dim() {
        return Err(Error::dim("state domain centre", lyap.dim(), domain.center.len()));
    }
    if ensemble.state_dim() != lyap.dim() {
        return Err(Error::dim("world model state", lyap.dim(), ensemble.state_dim()));
    }
    let c = DVector::from_column_slice(&domain.center);
    let sa = sigma_max(&lyap.features);
    let sq = sigma_max(&lyap.q);
    let feat_sup = (&lyap.features * &c).norm() + sa * domain.radius;
    let dev_sup = (&c - &lyap.s_safe).norm() + domain.radius;
    let l_bar = 2.0 * sa * feat_sup + 2.0 * lyap.eta * sq * dev_sup;
    let j_bar = ensemble.members().iter().map(|m| sigma_max(&m.a)).fold(0.0, f64::max);
    Ok((l_bar, j_bar))
}

/// `(delta_slack + kappa d_bar) / (L_bar (1 + J_bar))`.
pub fn epsilon_star(delta_slack: f64, kappa: f64, d_bar: f64, l_bar: f64, j_bar: f64) -> Result<f64> {
    if !(l_bar > 0.0) {
        return Err(Error::invalid(format!("Lipschitz bound must be positive, got {l_bar}")));
    }
    if !(kappa >= 0.0 && delta_slack >= 0.0 && d_bar >= 0.0 && j_bar >= 0.0) {
        return Err(Error::invalid("kappa, delta_slack, d_bar and J_bar must be nonnegative"));
    }
    Ok((delta_slack + kappa * d_bar) / (l_bar * (1.0 + j_bar)))
}

/// Variant with the typical state norm `s_bar` in the denominator.
pub fn epsilon_star_scaled(delta_slack: f64, kappa: f64, d_bar: f64, l_bar: f64, j_bar: f64, s_bar: f64) -> Result<f64> {
    if !(s_bar > 0.0) {
        return Err(Error::invalid(format!("typical state norm must be positive, got {s_bar}")));
    }
    Ok(epsilon_star(delta_slack, kappa, d_bar, l_bar, j_bar)? / s_bar)
}

/// How the expected next-step Lyapunov value is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    /// `L(mu_W(s, a))`.
    #[default]
    MeanPrediction,
    /// Average of `L` over member predictions.
    MemberMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyCheck {
    pub safe: bool,
    pub delta_l: f64,
    /// `-kappa d_C(s) + delta_slack`.
    pub bound: f64,
}

#[derive(Clone, Copy)]
pub struct SafetyContext<'a> {
    pub ensemble: &'a WorldModelEnsemble,
    pub lyapunov: &'a LyapunovParams,
    pub constraint: &'a dyn StateConstraint,
    pub kappa: f64,
    pub delta_slack: f64,
    pub mode: ExpectationMode,
}

impl SafetyContext<'_> {
    fn next_value(&self, s: &[f64], a: &[f64]) -> f64 {
        match self.mode {
            ExpectationMode::MeanPrediction => self.lyapunov.value_vec(&self.ensemble.predict_mean(s, a)),
            ExpectationMode::MemberMean => {
                let ms = self.ensemble.members();
                ms.iter().map(|m| self.lyapunov.value_vec(&m.predict(s, a))).sum::<f64>() / ms.len() as f64
            }
        }
    }

    fn check_with(&self, l_now: f64, bound: f64, s: &[f64], a: &[f64]) -> SafetyCheck {
        let delta_l = self.next_value(s, a) - l_now;
        SafetyCheck {
            safe: delta_l <= bound,
            delta_l,
            bound,
        }
    }
}

/// Safe iff `L(s') - L(s) <= -kappa d_C(s) + delta_slack` for the predicted `s'`.
pub fn check_lyapunov_safe(s: &[f64], a: &[f64], ctx: &SafetyContext<'_>) -> Result<SafetyCheck> {
    if s.len() != ctx.ensemble.state_dim() || s.len() != ctx.lyapunov.dim() {
        return Err(Error::dim("state", ctx.ensemble.state_dim(), s.len()));
    }
    if a.len() != ctx.ensemble.action_dim() {
        return Err(Error::dim("action", ctx.ensemble.action_dim(), a.len()));
    }
    let bound = -ctx.kappa * ctx.constraint.violation(s) + ctx.delta_slack;
    Ok(ctx.check_with(ctx.lyapunov.value(s), bound, s, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub penalty: f64,
    /// Finite-difference step as a fraction of each action's range.
    pub fd_rel_step: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ProjectionConfig {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            iterations: 20,
            step_size: 0.05,
            penalty: 10.0,
            fd_rel_step: 1e-4,
            lower,
            upper,
        }
    }

    fn clip(&self, a: &mut [f64]) {
        for ((x, lo), hi) in a.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub action: Vec<f64>,
    pub check: SafetyCheck,
    /// The initial action failed the check and was moved.
    pub projected: bool,
}

/// Accept `a0` if it is Lyapunov-safe, otherwise run clipped gradient
/// descent on `L(mu_W(s, a)) + penalty * d_C(mu_W(s, a))` with central
/// finite differences.
pub fn project_safe_action(s: &[f64], a0: &[f64], ctx: &SafetyContext<'_>, cfg: &ProjectionConfig) -> Result<ProjectionResult> {
    let da = ctx.ensemble.action_dim();
    if a0.len() != da || cfg.lower.len() != da || cfg.upper.len() != da {
        return Err(Error::dim("action bounds", da, a0.len().min(cfg.lower.len()).min(cfg.upper.len())));
    }
    if cfg.lower.iter().zip(&cfg.upper).any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::invalid("action bounds must be finite with lower <= upper"));
    }
    if s.len() != ctx.lyapunov.dim() || s.len() != ctx.ensemble.state_dim() {
        return Err(Error::dim("state", ctx.ensemble.state_dim(), s.len()));
    }
    let l_now = ctx.lyapunov.value(s);
    let bound = -ctx.kappa * ctx.constraint.violation(s) + ctx.delta_slack;
    let first = ctx.check_with(l_now, bound, s, a0);
    if first.safe {
        return Ok(ProjectionResult {
            action: a0.to_vec(),
            check: first,
            projected: false,
        });
    }
    let objective = |a: &[f64]| {
        let next = ctx.ensemble.predict_mean(s, a);
        ctx.lyapunov.value_vec(&next) + cfg.penalty * ctx.constraint.violation(next.as_slice())
    };
    let mut a = a0.to_vec();
    cfg.clip(&mut a);
    let mut grad = vec![0.0; da];
    for _ in 0..cfg.iterations {
        for k in 0..da {
            let h = cfg.fd_rel_step * (cfg.upper[k] - cfg.lower[k]).max(f64::MIN_POSITIVE);
            let orig = a[k];
            a[k] = orig + h;
            let up = objective(&a);
            a[k] = orig - h;
            let down = objective(&a);
            a[k] = orig;
            grad[k] = (up - down) / (2.0 * h);
        }
        for (x, g) in a.iter_mut().zip(&grad) {
            *x -= cfg.step_size * g;
        }
        cfg.clip(&mut a);
    }
    let check = ctx.check_with(l_now, bound, s, &a);
    Ok(ProjectionResult {
        action: a,
        check,
        projected: true,
    })
}

/// Fraction of steps with `L(s_{t+1}) < L(s_t)`.
pub fn lyapunov_decrease_rate(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InsufficientData("need at least two Lyapunov values".into()));
    }
    let down = values.windows(2).filter(|w| w[1] < w[0]).count();
    Ok(down as f64 / (values.len() - 1) as f64)
}
