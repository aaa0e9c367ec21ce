//! Seeded grid-traffic simulator, synthetic datasets and the closed-loop runner.
pub mod closed_loop;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod env;
pub use closed_loop::{
    certify_traffic, prepare_components, run_closed_loop, run_seeds, summarize_runs, write_trajectory_csv, ClosedLoopComponents,
    ClosedLoopConfig, EpisodeRunner, PolicyKind, RunMetrics, RunSummary, TrafficControlEnv,
};
pub use config::{AnomalyKind, AnomalySchedule, SimConfig};
pub use dataset::{generate_dataset, Dataset, SplitIndices, SplitSpec};
pub use env::{queue_pressure_split, simulate_panels, Bookkeeping, GridGeometry, SimState, StepRecord, TrafficSim, LOCAL_FEATURES};
