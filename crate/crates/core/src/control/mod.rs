//! Constraint evaluation, ensemble world models and the Lyapunov safety
//! filter with its model-error certificate.

pub mod certificate;
pub mod constraints;
pub mod exploration;
pub mod lyapunov;
pub mod world;

pub use certificate::{
    iterative_certificate, rollout, sample_transitions, CertificateConfig, CertificateRound, ClosedLoop, ControlEnv,
    LinearPolicy, LinearToyEnv, Policy, Rollout, SafetyCertificate, ToyFixture, UniformPolicy, Verdict,
};
pub use constraints::{constraint_violation, AggregateMetrics, BoxConstraint, ConstraintSpec, StateConstraint, TrafficConstraint};
pub use exploration::{anomaly_reward, exploration_noise_scale, exploration_prob, ExplorationMode, ExplorationParams, RewardWeights};
pub use lyapunov::{
    check_lyapunov_safe, epsilon_star, epsilon_star_scaled, lipschitz_bounds, lyapunov_decrease_rate, lyapunov_value,
    project_safe_action, spectral_norm, ExpectationMode, LyapunovParams, ProjectionConfig, ProjectionResult, SafetyCheck,
    SafetyContext, StateDomain, DEFAULT_DELTA_SLACK, DEFAULT_KAPPA,
};
pub use world::{
    ensemble_predict, fit_world_ensemble, model_error, AffineModel, Transition, WorldModelEnsemble, DEFAULT_EPS_FLOOR,
    DEFAULT_MEMBERS, RIDGE_LAMBDA,
};
