//! `tsafe`: dataset generation, calibration, detection, certification,
//! closed-loop simulation and FDR audits on the grid-traffic simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.
//! Log verbosity follows `RUST_LOG`.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsafe_core::sim::PolicyKind;

use crate::commands::resolve;
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "tsafe", version, about = "Conformal intervals, FDR-controlled detection and Lyapunov certificates for grid traffic")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed routed to every subsystem (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must exist.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    QueuePressure,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset: flows, anomaly mask, split, coverage map.
    Generate {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fit the forecaster and conformal ledger; write diagnostics.
    Calibrate {
        /// Dataset directory (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Conformal p-values and BY/BH rejections on the test segment.
    Detect {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding ledger.json (defaults to --out).
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Re-trim the calibration scores at this level.
        #[arg(long)]
        trim: Option<f64>,
    },
    /// Iterative model-error certificate for the filtered controller.
    Certify {
        /// Use the linear toy system instead of the traffic simulator.
        #[arg(long)]
        toy: bool,
    },
    /// Closed-loop episodes over several seeds.
    Simulate {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum, default_value = "on")]
        filter: Switch,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
    },
    /// Block-bootstrap FDR audit of a detection run.
    AuditFdr {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding pvalues.csv (defaults to --out).
        #[arg(long)]
        pvalues: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Generate { steps } => {
            if let Some(s) = steps {
                cfg.steps = s;
            }
            commands::generate(&cfg, out)
        }
        Command::Calibrate { data } => commands::calibrate(&cfg, &resolve(&data, out), out),
        Command::Detect { data, ledger, trim } => commands::detect(&cfg, &resolve(&data, out), &resolve(&ledger, out), out, trim),
        Command::Certify { toy } => commands::certify(&cfg, out, toy),
        Command::Simulate { seeds, filter, policy } => {
            let policy = match policy {
                Some(PolicyArg::QueuePressure) => PolicyKind::QueuePressure,
                Some(PolicyArg::Random) => PolicyKind::Random,
                None => cfg.closed_loop.policy,
            };
            let seeds = seeds.unwrap_or(cfg.seeds);
            commands::simulate(&cfg, out, seeds, matches!(filter, Switch::On), policy)
        }
        Command::AuditFdr { data, pvalues, replicates } => {
            let replicates = replicates.unwrap_or(cfg.audit.replicates);
            commands::audit_fdr(&cfg, &resolve(&data, out), &resolve(&pvalues, out), out, replicates)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tsafe: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
