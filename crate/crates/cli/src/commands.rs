use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use tsafe_core::aggregate::{
    aggregate_mean, aggregate_pvalues, aggregate_variance, propagate_flags, write_aggregate_csv, AggregateRow, CovarianceModel,
};
use tsafe_core::anomaly::{block_bootstrap_verify, BootstrapConfig, FdrProcedure};
use tsafe_core::conformal::{build_intervals, coverage_efficiency, evaluate_coverage, write_intervals_csv, ForecastBundle};
use tsafe_core::control::{CertificateConfig, SafetyCertificate, ToyFixture};
use tsafe_core::forecaster::{pit_values, reliability_curve};
use tsafe_core::io::{fmt_f64, read_json, Panel, read_panel_csv, write_csv_rows, write_json, write_panel_csv};
use tsafe_core::sim::dataset::{CONFIG_FILE, FLOWS_FILE, MASK_FILE, SPLIT_FILE};
use tsafe_core::sim::detect::{detect_panel, fit_calibration, forecast_panel, summarize_fdr, CalibrationArtifact, DetectionPanel, FdrSummary};
use tsafe_core::sim::{
    certify_traffic, generate_dataset, prepare_components, run_seeds, write_trajectory_csv, Dataset, GridGeometry, PolicyKind,
};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const LEDGER_FILE: &str = "ledger.json";
pub const PIT_FILE: &str = "pit.csv";
pub const INTERVALS_FILE: &str = "intervals.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const COVERAGE_REPORT_FILE: &str = "coverage_report.json";
pub const PVALUES_FILE: &str = "pvalues.csv";
pub const PVALUE_COLUMN: &str = "p_value";
pub const BY_FILE: &str = "rejections_by.csv";
pub const BH_FILE: &str = "rejections_bh.csv";
pub const DETECTION_REPORT_FILE: &str = "detection_report.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DEPENDENCE_REPORT_FILE: &str = "dependence_report.json";

type CmdResult = Result<(), Failure>;

pub fn require_dir(dir: &Path) -> Result<(), Failure> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::config(format!("directory {} does not exist", dir.display())))
    }
}

fn require_files(dir: &Path, files: &[&str]) -> Result<(), Failure> {
    require_dir(dir)?;
    for f in files {
        if !dir.join(f).is_file() {
            return Err(Failure::config(format!("{} is missing {f}", dir.display())));
        }
    }
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<(Dataset, GridGeometry), Failure> {
    require_files(dir, &[FLOWS_FILE, MASK_FILE, SPLIT_FILE, CONFIG_FILE])?;
    let dataset = Dataset::read(dir)?;
    let geometry = GridGeometry::new(&dataset.config)?;
    Ok((dataset, geometry))
}

pub fn generate(cfg: &RunConfig, out: &Path) -> CmdResult {
    require_dir(out)?;
    let dataset = generate_dataset(&cfg.sim, cfg.steps, &cfg.split)?;
    dataset.write(out)?;
    let anomalous = dataset.mask.iter().flatten().filter(|&&m| m).count();
    println!(
        "generated {} steps x {} cells (seed {}), anomalous cell-steps {anomalous}, split train {:?} cal {:?} test {:?}",
        dataset.flows.len(),
        dataset.cell_count(),
        cfg.sim.seed,
        dataset.split.train,
        dataset.split.cal,
        dataset.split.test
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CoverageSummary {
    test_start: usize,
    test_end: usize,
    nominal: f64,
    coverage: f64,
    riw: f64,
    efficiency: f64,
    pit_ks: f64,
    reliability_error: f64,
}

pub fn calibrate(cfg: &RunConfig, data: &Path, out: &Path) -> CmdResult {
    require_dir(out)?;
    let (dataset, geometry) = read_dataset(data)?;
    let topo = &geometry.cell_topology;
    info!("fitting predictor and ledger on {} cells", dataset.cell_count());
    let artifact = fit_calibration(&dataset, topo, &cfg.detector)?;
    write_json(&out.join(LEDGER_FILE), &artifact)?;

    let test = dataset.split.test.clone();
    let (mu, sigma) = forecast_panel(&artifact, &dataset.flows, test.clone(), topo, &dataset.config)?;
    let truth = &dataset.flows[test.clone()];
    let (lo, hi) = truth
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    let (mut coverage, mut riw) = (0.0, 0.0);
    let mut interval_sets = Vec::with_capacity(truth.len());
    for k in 0..truth.len() {
        let iv = build_intervals(&ForecastBundle::one_step(&mu[k], &sigma[k])?, &artifact.ledger)?;
        let truths: Vec<Vec<f64>> = truth[k].iter().map(|&y| vec![y]).collect();
        let r = evaluate_coverage(&iv, &truths, range)?;
        coverage += r.coverage;
        riw += r.riw;
        interval_sets.push(iv);
    }
    write_intervals_csv(&out.join(INTERVALS_FILE), &interval_sets)?;
    coverage /= truth.len() as f64;
    riw /= truth.len() as f64;

    let flat = |p: &[Vec<f64>]| p.iter().flatten().copied().collect::<Vec<_>>();
    let (mu_f, sigma_f, y_f) = (flat(&mu), flat(&sigma), flat(truth));
    let pit = pit_values(&mu_f, &sigma_f, &y_f)?;
    let cells = dataset.cell_count();
    let pit_rows = pit
        .pit
        .iter()
        .enumerate()
        .map(|(k, v)| vec![(k / cells).to_string(), (k % cells).to_string(), fmt_f64(*v)]);
    write_csv_rows(&out.join(PIT_FILE), &["time", "node", "pit"], pit_rows)?;
    let rel = reliability_curve(&mu_f, &sigma_f, &y_f, &cfg.reliability_levels)?;
    let rel_rows = rel
        .levels
        .iter()
        .zip(&rel.empirical)
        .map(|(l, e)| vec![fmt_f64(*l), fmt_f64(*e)]);
    write_csv_rows(&out.join(RELIABILITY_FILE), &["nominal", "empirical"], rel_rows)?;

    let summary = CoverageSummary {
        test_start: test.start,
        test_end: test.end,
        nominal: 1.0 - artifact.ledger.config.target_alpha,
        coverage,
        riw,
        efficiency: coverage_efficiency(coverage, riw)?,
        pit_ks: pit.ks_statistic,
        reliability_error: rel.calibration_error,
    };
    write_json(&out.join(COVERAGE_REPORT_FILE), &summary)?;
    println!(
        "calibrated {} clusters; test coverage {:.4} (target {:.2}), RIW {:.4}, Cov.Eff. {:.3}, PIT KS {:.4}",
        artifact.ledger.clusters.len(),
        summary.coverage,
        summary.nominal,
        summary.riw,
        summary.efficiency,
        summary.pit_ks
    );
    Ok(())
}

fn write_flags(path: &Path, flags: &[Vec<bool>]) -> tsafe_core::Result<()> {
    let rows = flags.iter().enumerate().flat_map(|(t, row)| {
        row.iter()
            .enumerate()
            .map(move |(i, &r)| vec![t.to_string(), i.to_string(), u8::from(r).to_string()])
    });
    write_csv_rows(path, &["time", "node", "rejected"], rows)
}

#[derive(Debug, Serialize)]
struct DetectionReport {
    test_start: usize,
    test_end: usize,
    alpha: f64,
    trim: f64,
    by: FdrSummary,
    bh: FdrSummary,
}

/// Intersection-level mean, kernel-aggregated sigma, aggregated p-value and
/// flag of every test step.
fn aggregate_rows(cfg: &RunConfig, geometry: &GridGeometry, panel: &DetectionPanel, flags: &Panel<bool>) -> tsafe_core::Result<Vec<AggregateRow>> {
    let map = &geometry.coverage;
    let coords = map.cell_centers();
    let model = CovarianceModel::DistanceKernel {
        length_scale_km: cfg.closed_loop.kernel_length_scale_km,
    };
    let mut rows = Vec::with_capacity(panel.pvalues.len() * map.intersection_count());
    for (t, step_flags) in flags.iter().enumerate() {
        let mu = aggregate_mean(&panel.mu[t], map)?;
        let sigma = aggregate_variance(&panel.sigma[t], map, &model, &coords)?;
        let p = aggregate_pvalues(&panel.pvalues[t], map, cfg.closed_loop.pvalue_rule)?;
        let flag = propagate_flags(step_flags, map)?;
        for j in 0..map.intersection_count() {
            rows.push(AggregateRow {
                time: t,
                intersection: j,
                mu: mu[j],
                sigma: sigma[j],
                p: p[j],
                flag: flag[j],
            });
        }
    }
    Ok(rows)
}

pub fn detect(cfg: &RunConfig, data: &Path, ledger_dir: &Path, out: &Path, trim: Option<f64>) -> CmdResult {
    require_dir(out)?;
    require_files(ledger_dir, &[LEDGER_FILE])?;
    let (dataset, geometry) = read_dataset(data)?;
    let test = dataset.split.test.clone();
    if test.is_empty() {
        return Err(Failure::config("test segment is empty"));
    }
    let mut artifact: CalibrationArtifact = read_json(&ledger_dir.join(LEDGER_FILE))?;
    if let Some(trim) = trim {
        artifact.retrim(&dataset, &geometry.cell_topology, trim)?;
    }
    let alpha = artifact.config.fdr_alpha;
    let panel = detect_panel(&artifact, &dataset, test.clone(), &geometry.cell_topology)?;
    let truth = dataset.mask[test.clone()].to_vec();
    write_panel_csv(&out.join(PVALUES_FILE), PVALUE_COLUMN, &panel.pvalues)?;
    write_flags(&out.join(BY_FILE), &panel.by_rejected)?;
    write_flags(&out.join(BH_FILE), &panel.bh_rejected)?;
    let flags = match artifact.config.procedure {
        FdrProcedure::By => &panel.by_rejected,
        FdrProcedure::Bh => &panel.bh_rejected,
    };
    write_aggregate_csv(&out.join(AGGREGATES_FILE), &aggregate_rows(cfg, &geometry, &panel, flags)?)?;
    let report = DetectionReport {
        test_start: test.start,
        test_end: test.end,
        alpha,
        trim: artifact.config.trim,
        by: summarize_fdr(FdrProcedure::By, alpha, &panel.by_rejected, &truth)?,
        bh: summarize_fdr(FdrProcedure::Bh, alpha, &panel.bh_rejected, &truth)?,
    };
    write_json(&out.join(DETECTION_REPORT_FILE), &report)?;
    println!(
        "detected over steps {}..{} at alpha {alpha} (trim {}): BY FDR {:.4} power {:.4} ({} rejections); BH FDR {:.4} power {:.4} ({} rejections)",
        test.start,
        test.end,
        report.trim,
        report.by.mean_fdr,
        report.by.mean_power,
        report.by.rejections,
        report.bh.mean_fdr,
        report.bh.mean_power,
        report.bh.rejections
    );
    Ok(())
}

fn print_certificate(label: &str, c: &SafetyCertificate) {
    println!(
        "{label} certificate: eps_model {:.6} L_bar {:.6} J_bar {:.6} eps_star {:.6e} (d_bar_C {:.4}) verdict {:?} after {} round(s)",
        c.epsilon_model,
        c.l_bar,
        c.j_bar,
        c.epsilon_star,
        c.d_bar_c,
        c.verdict,
        c.rounds.len()
    );
}

pub fn certify(cfg: &RunConfig, out: &Path, toy: bool) -> CmdResult {
    require_dir(out)?;
    let seed = cfg.seed();
    let cert = if toy {
        let fixture = ToyFixture::new(seed)?;
        let cc = CertificateConfig {
            max_rounds: cfg.closed_loop.max_certificate_rounds,
            ..CertificateConfig::new(fixture.domain.clone())
        };
        fixture.certify(&cc, seed)?
    } else {
        let comp = prepare_components(&cfg.closed_loop)?;
        certify_traffic(&comp, seed)?
    };
    write_json(&out.join(CERTIFICATE_FILE), &cert)?;
    print_certificate(if toy { "toy" } else { "traffic" }, &cert);
    Ok(())
}

pub fn simulate(cfg: &RunConfig, out: &Path, seeds: usize, filter: bool, policy: PolicyKind) -> CmdResult {
    require_dir(out)?;
    if seeds == 0 {
        return Err(Failure::config("--seeds must be at least 1"));
    }
    let comp = prepare_components(&cfg.closed_loop)?;
    let base = cfg.seed();
    let list: Vec<u64> = (0..seeds as u64).map(|k| base + k).collect();
    let (rows, summary) = run_seeds(&comp, policy, filter, &list)?;
    write_trajectory_csv(&out.join(TRAJECTORY_FILE), &rows)?;
    write_json(&out.join(METRICS_FILE), &summary)?;
    println!(
        "{policy:?} filter {} over {seeds} seed(s): reward {:.4} ± {:.4}, violations/ep {:.3} ± {:.3}, safety% {:.1} ± {:.1}, rho_Lyap {:.3} ± {:.3}",
        if filter { "on" } else { "off" },
        summary.mean_reward.mean,
        summary.mean_reward.ci95,
        summary.violations_per_episode.mean,
        summary.violations_per_episode.ci95,
        summary.safety_pct.mean,
        summary.safety_pct.ci95,
        summary.rho_lyap.mean,
        summary.rho_lyap.ci95
    );
    Ok(())
}

pub fn audit_fdr(cfg: &RunConfig, data: &Path, pvalue_dir: &Path, out: &Path, replicates: usize) -> CmdResult {
    require_dir(out)?;
    require_files(pvalue_dir, &[PVALUES_FILE, DETECTION_REPORT_FILE])?;
    let (dataset, geometry) = read_dataset(data)?;
    let panel = read_panel_csv(&pvalue_dir.join(PVALUES_FILE), PVALUE_COLUMN)?;
    let report: serde_json::Value = read_json(&pvalue_dir.join(DETECTION_REPORT_FILE))?;
    let start = report["test_start"]
        .as_u64()
        .ok_or_else(|| Failure::config(format!("{DETECTION_REPORT_FILE} lacks test_start")))? as usize;
    let end = start + panel.len();
    if end > dataset.mask.len() {
        return Err(Failure::config(format!("p-value panel overruns the dataset ({end} > {})", dataset.mask.len())));
    }
    let truth = dataset.mask[start..end].to_vec();
    let bc = BootstrapConfig {
        blocks: cfg.audit.blocks.clone(),
        replicates,
        alpha: cfg.audit.alpha,
        procedure: cfg.audit.procedure,
        seed: cfg.seed(),
    };
    let dep = block_bootstrap_verify(&panel, &truth, &geometry.cell_topology, &bc)?;
    write_json(&out.join(DEPENDENCE_REPORT_FILE), &dep)?;
    println!("{:?} block-bootstrap audit, {} replicates, alpha {}:", dep.procedure, dep.replicates, dep.alpha);
    for b in &dep.blocks {
        println!(
            "  time block {:>2} hops {}: rho_block {:.3}, FDR mean {:.4}, q95 {:.4}",
            b.time_block, b.space_hops, b.rho_block, b.fdr_mean, b.fdr_q95
        );
    }
    Ok(())
}

pub fn resolve(dir: &Option<PathBuf>, out: &Path) -> PathBuf {
    dir.clone().unwrap_or_else(|| out.to_path_buf())
}
