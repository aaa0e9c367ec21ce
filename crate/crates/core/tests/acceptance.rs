//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//!
//! Runs with `harness = false` so the report is printed on every
//! `cargo test`; the process exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, StudentT};

use tsafe_core::anomaly::{
    bh_procedure, by_procedure, conformal_pvalue, empirical_fdr, trim_calibration, tune_dependence, BlockConfig,
    DependentNullConfig, DependentNullGenerator,
};
use tsafe_core::conformal::{
    build_intervals, cluster_nodes, conformity_scores, coverage_efficiency, error_statistics, CalibrationLedger,
    ClusterAssignment, ForecastBundle, LedgerConfig,
};
use tsafe_core::control::lyapunov::{SPECTRAL_ITERS, SPECTRAL_TOL};
use tsafe_core::control::{
    epsilon_star, lipschitz_bounds, lyapunov_decrease_rate, rollout, spectral_norm, AffineModel, CertificateConfig,
    LyapunovParams, StateDomain, ToyFixture, Verdict, WorldModelEnsemble,
};
use tsafe_core::forecaster::{attention_ratio_closed_form, pugat_attention, temp_scaled_attention, AttentionParams};
use tsafe_core::math::harmonic;
use tsafe_core::sim::{prepare_components, ClosedLoopConfig, EpisodeRunner, GridGeometry, PolicyKind, SimConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Monte-Carlo standard error of a proportion.
fn mc_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

// 1. Clustered split-conformal coverage on exchangeable synthetic data.

const C1_NODES: usize = 50;
const C1_CAL: usize = 500;
const C1_VAL: usize = 200;
const C1_TEST_PER_NODE: usize = 100;
const C1_SEEDS: u64 = 20;
const C1_BAND: (f64, f64) = (0.885, 0.925);
const C1_BUDGET: Duration = Duration::from_secs(10);

/// Nodes differ in error scale, tail weight and forecast-sigma misspecification.
fn c1_seed(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<(f64, f64, f64)> = (0..C1_NODES)
        .map(|_| {
            let scale = rng.random_range(0.5..3.0);
            let dof = [3.0, 5.0, 30.0][rng.random_range(0..3)];
            let misspec = rng.random_range(0.6..1.6);
            (scale, dof, misspec)
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng, n: usize, (scale, dof, misspec): (f64, f64, f64)| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = StudentT::new(dof).unwrap();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..150.0)).collect();
        let y: Vec<f64> = mu.iter().map(|m| m + scale * t.sample(rng)).collect();
        let sigma = vec![scale * misspec; n];
        (y, mu, sigma)
    };
    let mut val_resid = Vec::with_capacity(C1_NODES);
    let mut cal_scores = Vec::with_capacity(C1_NODES);
    for &node in &nodes {
        let (y, mu, sigma) = draw(&mut rng, C1_VAL, node);
        val_resid.push(y.iter().zip(&mu).zip(&sigma).map(|((y, m), s)| (y - m) / s).collect::<Vec<f64>>());
        let (y, mu, sigma) = draw(&mut rng, C1_CAL, node);
        cal_scores.push(conformity_scores(&y, &mu, &sigma).unwrap());
    }
    let assignment = cluster_nodes(&error_statistics(&val_resid), 5, seed).unwrap();
    let ledger = CalibrationLedger::new(&assignment, &cal_scores, LedgerConfig::default()).unwrap();
    let mut mus = Vec::new();
    let mut sigmas = Vec::new();
    let mut truths = Vec::new();
    for &node in &nodes {
        let (y, mu, sigma) = draw(&mut rng, C1_TEST_PER_NODE, node);
        mus.push(mu);
        sigmas.push(sigma);
        truths.push(y);
    }
    let intervals = build_intervals(&ForecastBundle::new(mus, sigmas).unwrap(), &ledger).unwrap();
    let covered: usize = truths
        .iter()
        .enumerate()
        .map(|(i, ys)| ys.iter().enumerate().filter(|(h, &y)| intervals.contains(i, *h, y)).count())
        .sum();
    covered as f64 / (C1_NODES * C1_TEST_PER_NODE) as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cov: Vec<f64> = (0..C1_SEEDS).map(c1_seed).collect();
    let elapsed = start.elapsed();
    let m = mean(&cov);
    let pass = (C1_BAND.0..=C1_BAND.1).contains(&m) && elapsed < C1_BUDGET;
    outcome(
        pass,
        format!(
            "conformal coverage: mean {m:.4} over {C1_SEEDS} seeds (band [{}, {}]), range [{:.4}, {:.4}], {:.2} s (< {} s)",
            C1_BAND.0,
            C1_BAND.1,
            cov.iter().cloned().fold(f64::INFINITY, f64::min),
            cov.iter().cloned().fold(0.0, f64::max),
            elapsed.as_secs_f64(),
            C1_BUDGET.as_secs()
        ),
    )
}

// 2. ACI under a variance step-shift.

const C2_STEPS: usize = 10_000;
const C2_GAMMA: f64 = 0.05;
const C2_ALPHA: f64 = 0.1;
const C2_TOL: f64 = 0.02;
const C2_CAL: usize = 500;
/// Variance multiplier applied at mid-stream.
const C2_VAR_SHIFT: f64 = 2.0;
/// Reported only: its 90% quantile lies beyond every calibration score.
const C2_VAR_SHIFT_EXTREME: f64 = 4.0;

/// (overall, before, after) miscoverage.
fn aci_stream(var_shift: f64, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cal: Vec<f64> = (0..C2_CAL).map(|_| f64::abs(StandardNormal.sample(&mut rng))).collect();
    let assignment = ClusterAssignment { k: 1, labels: vec![0], centroids: vec![[0.0; 3]] };
    let config = LedgerConfig { target_alpha: C2_ALPHA, gamma_aci: C2_GAMMA, ..Default::default() };
    let mut ledger = CalibrationLedger::new(&assignment, &[cal], config).unwrap();
    let bundle = ForecastBundle::one_step(&[0.0], &[1.0]).unwrap();
    let mut misses = [0usize; 2];
    for t in 0..C2_STEPS {
        let after = t >= C2_STEPS / 2;
        let sd = if after { var_shift.sqrt() } else { 1.0 };
        let z: f64 = StandardNormal.sample(&mut rng);
        let miss = !build_intervals(&bundle, &ledger).unwrap().contains(0, 0, sd * z);
        misses[usize::from(after)] += usize::from(miss);
        ledger.record_outcome(0, miss).unwrap();
    }
    let half = C2_STEPS as f64 / 2.0;
    (
        (misses[0] + misses[1]) as f64 / C2_STEPS as f64,
        misses[0] as f64 / half,
        misses[1] as f64 / half,
    )
}

fn criterion_2() -> Outcome {
    let (total, before, after) = aci_stream(C2_VAR_SHIFT, 2);
    let (extreme, _, _) = aci_stream(C2_VAR_SHIFT_EXTREME, 2);
    outcome(
        (total - C2_ALPHA).abs() <= C2_TOL,
        format!(
            "ACI tracking, variance x{C2_VAR_SHIFT} at mid-stream: long-run miscoverage {total:.4} (target {C2_ALPHA} +/- {C2_TOL}); \
             halves {before:.4} / {after:.4}; variance x{C2_VAR_SHIFT_EXTREME} (not asserted, beyond the alpha floor) {extreme:.4}"
        ),
    )
}

// 3. Super-uniformity of conformal p-values.

const C3_RETAINED: usize = 199;
const C3_CALIBRATIONS: usize = 1000;
const C3_TESTS_PER_CAL: usize = 100;
const C3_LEVELS: [f64; 4] = [0.01, 0.05, 0.1, 0.2];

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = [0usize; 4];
    for _ in 0..C3_CALIBRATIONS {
        let cal: Vec<f64> = (0..C3_RETAINED).map(|_| StandardNormal.sample(&mut rng)).collect();
        let trimmed = trim_calibration(&cal, 0.0).unwrap();
        assert_eq!(trimmed.len(), C3_RETAINED);
        for _ in 0..C3_TESTS_PER_CAL {
            let p = conformal_pvalue(&trimmed, StandardNormal.sample(&mut rng));
            for (h, &a) in hits.iter_mut().zip(&C3_LEVELS) {
                *h += usize::from(p <= a);
            }
        }
    }
    let n = C3_CALIBRATIONS * C3_TESTS_PER_CAL;
    let mut pass = true;
    let mut parts = Vec::new();
    for (&h, &a) in hits.iter().zip(&C3_LEVELS) {
        let rate = h as f64 / n as f64;
        let bound = a + 1.0 / (C3_RETAINED as f64 + 1.0) + 3.0 * mc_se(a, n);
        pass &= rate <= bound;
        parts.push(format!("P(p<={a}) {rate:.4} <= {bound:.4}"));
    }
    outcome(pass, format!("p-value super-uniformity, n'={C3_RETAINED}, {n} draws: {}", parts.join(", ")))
}

// 4. Trimmed calibration under contamination.

const C4_CAL: usize = 1000;
const C4_CONTAMINATION: f64 = 0.02;
const C4_ALPHA: f64 = 0.05;
const C4_BOUND: f64 = 0.09;

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let outlier = Normal::new(6.0, 1.0).unwrap();
    let calibrations = 1000;
    let per_cal = 100;
    let (mut trimmed_rej, mut raw_rej) = (0usize, 0usize);
    for _ in 0..calibrations {
        let cal: Vec<f64> = (0..C4_CAL)
            .map(|_| {
                if rng.random::<f64>() < C4_CONTAMINATION {
                    outlier.sample(&mut rng)
                } else {
                    StandardNormal.sample(&mut rng)
                }
            })
            .collect();
        let trimmed = trim_calibration(&cal, C4_CONTAMINATION).unwrap();
        let raw = trim_calibration(&cal, 0.0).unwrap();
        for _ in 0..per_cal {
            let s: f64 = StandardNormal.sample(&mut rng);
            trimmed_rej += usize::from(conformal_pvalue(&trimmed, s) <= C4_ALPHA);
            raw_rej += usize::from(conformal_pvalue(&raw, s) <= C4_ALPHA);
        }
    }
    let n = calibrations * per_cal;
    let rate = trimmed_rej as f64 / n as f64;
    outcome(
        rate <= C4_BOUND,
        format!(
            "trimming bound, {}% contamination, {n} null draws: rejection {rate:.4} <= {C4_BOUND} at alpha {C4_ALPHA} (untrimmed {:.4})",
            C4_CONTAMINATION * 100.0,
            raw_rej as f64 / n as f64
        ),
    )
}

// 5. BY under spatio-temporal dependence.

const C5_TARGETS: [f64; 3] = [0.2, 0.34, 0.48];
const C5_PANELS: usize = 500;
const C5_PANEL_STEPS: usize = 10;
const C5_ALPHA: f64 = 0.05;
const C5_BLOCK: BlockConfig = BlockConfig { time_block: 10, space_hops: 2 };
const C5_BUDGET: Duration = Duration::from_secs(120);

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let topology = GridGeometry::new(&SimConfig::default()).unwrap().cell_topology;
    let m = topology.node_count();
    let mut pass = m == 293;
    let mut parts = Vec::new();
    for (r, &target) in C5_TARGETS.iter().enumerate() {
        let (cfg, achieved) =
            match tune_dependence(&topology, DependentNullConfig::default(), C5_BLOCK, target, 300, 50 + r as u64) {
                Ok(v) => v,
                Err(e) => {
                    pass = false;
                    parts.push(format!("rho {target}: tuning failed ({e})"));
                    continue;
                }
            };
        let generator = DependentNullGenerator::new(&topology, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + r as u64);
        let (mut fdr_by, mut fdr_bh) = (Vec::with_capacity(C5_PANELS), Vec::with_capacity(C5_PANELS));
        for _ in 0..C5_PANELS {
            let panel = generator.panel(C5_PANEL_STEPS, &mut rng);
            let (mut by, mut bh) = (0.0, 0.0);
            for (p, truth) in panel.pvalues.iter().zip(&panel.truth) {
                by += empirical_fdr(&by_procedure(p, C5_ALPHA).unwrap().rejected, truth).unwrap().0;
                bh += empirical_fdr(&bh_procedure(p, C5_ALPHA).unwrap().rejected, truth).unwrap().0;
            }
            fdr_by.push(by / C5_PANEL_STEPS as f64);
            fdr_bh.push(bh / C5_PANEL_STEPS as f64);
        }
        let by_mean = mean(&fdr_by);
        let sd = (fdr_by.iter().map(|v| (v - by_mean).powi(2)).sum::<f64>() / (C5_PANELS - 1) as f64).sqrt();
        let bound = C5_ALPHA + 3.0 * sd / (C5_PANELS as f64).sqrt();
        pass &= by_mean <= bound && (achieved - target).abs() < 0.02;
        parts.push(format!(
            "rho {target} (achieved {achieved:.3}): BY {by_mean:.4} <= {bound:.4}, BH {:.4}",
            mean(&fdr_bh)
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < C5_BUDGET;
    outcome(
        pass,
        format!(
            "BY under dependence, m={m}, {C5_PANELS} panels x {C5_PANEL_STEPS} steps: {}; {:.1} s (< {} s)",
            parts.join("; "),
            elapsed.as_secs_f64(),
            C5_BUDGET.as_secs()
        ),
    )
}

// 6. Attention identities.

const C6_INSTANCES: usize = 1000;
const C6_REL_TOL: f64 = 1e-12;

struct AttentionInstance {
    logits: Vec<f64>,
    sigma: Vec<f64>,
    neighbors: Vec<usize>,
    source: usize,
    params: AttentionParams,
}

fn attention_instance(rng: &mut ChaCha8Rng) -> AttentionInstance {
    let nodes = rng.random_range(4..12);
    let sigma: Vec<f64> = (0..nodes).map(|_| rng.random_range(0.05..3.0)).collect();
    let source = rng.random_range(0..nodes);
    let mut neighbors: Vec<usize> = (0..nodes).filter(|&j| j != source && rng.random::<f64>() < 0.7).collect();
    for j in (0..nodes).filter(|&j| j != source) {
        if neighbors.len() >= 2 {
            break;
        }
        if !neighbors.contains(&j) {
            neighbors.push(j);
        }
    }
    neighbors.push(source);
    let logits = (0..neighbors.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
    let params = AttentionParams::new(DMatrix::identity(1, 1), DVector::zeros(2))
        .unwrap()
        .with_gamma_raw(rng.random_range(-2.0..2.0))
        .with_self_loop_bias(rng.random_range(-1.0..1.0));
    AttentionInstance { logits, sigma, neighbors, source, params }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_rel = 0.0f64;
    let mut sign_failures = 0usize;
    let mut temp_changed = 0usize;
    let mut pugat_changed = 0usize;
    for _ in 0..C6_INSTANCES {
        let inst = attention_instance(&mut rng);
        let AttentionInstance { logits, sigma, neighbors, source, params } = &inst;
        let row = pugat_attention(logits, sigma, neighbors, *source, params).unwrap();
        let gamma = params.gamma();
        // Every ordered pair of non-self neighbours.
        let others: Vec<usize> = (0..neighbors.len()).filter(|&k| neighbors[k] != *source).collect();
        for &a in &others {
            for &b in &others {
                let computed = row[a] / row[b];
                let closed = attention_ratio_closed_form(
                    logits[a],
                    logits[b],
                    gamma,
                    sigma[neighbors[a]],
                    sigma[neighbors[b]],
                );
                worst_rel = worst_rel.max(((computed - closed) / closed).abs());
            }
        }

        // Raising a neighbour's uncertainty lowers its weight; raising its logit raises it.
        let k = others[0];
        let j = neighbors[k];
        let mut noisier = sigma.clone();
        noisier[j] += 0.5;
        let after = pugat_attention(logits, &noisier, neighbors, *source, params).unwrap();
        sign_failures += usize::from(after[k] >= row[k] || after[k].is_nan());
        let mut louder = logits.clone();
        louder[k] += 0.5;
        let after = pugat_attention(&louder, sigma, neighbors, *source, params).unwrap();
        sign_failures += usize::from(after[k] <= row[k] || after[k].is_nan());
        if pugat_attention(logits, &noisier, neighbors, *source, params).unwrap() != row {
            pugat_changed += 1;
        }

        // Temperature scaling reads only the source uncertainty.
        let temp_row = |s: &[f64]| temp_scaled_attention(logits, s[*source], 0.7).unwrap();
        let base: Vec<u64> = temp_row(sigma).iter().map(|v| v.to_bits()).collect();
        let mut perturbed = sigma.clone();
        for &n in neighbors.iter().filter(|&&n| n != *source) {
            perturbed[n] *= rng.random_range(0.1..10.0);
        }
        let bits: Vec<u64> = temp_row(&perturbed).iter().map(|v| v.to_bits()).collect();
        temp_changed += usize::from(bits != base);
    }
    outcome(
        worst_rel <= C6_REL_TOL && sign_failures == 0 && temp_changed == 0 && pugat_changed == C6_INSTANCES,
        format!(
            "attention identities, {C6_INSTANCES} instances: worst ratio rel. error {worst_rel:.2e} (<= {C6_REL_TOL:e}), \
             {sign_failures} sign failures, {temp_changed} temperature rows changed by neighbour perturbation, \
             {pugat_changed} uncertainty-guided rows changed"
        ),
    )
}

// 7. Safety certificate and closed loop on the toy system.

const C7_SEEDS: u64 = 10;
const C7_STEPS: usize = 5000;
const C7_WINDOW: usize = 1000;
const C7_RHO_MIN: f64 = 0.9;

fn criterion_7() -> Outcome {
    let mut pass = true;
    let mut worst_tail = 0.0f64;
    let mut rhos = Vec::new();
    let mut certified = 0;
    let mut margin = f64::INFINITY;
    let mut limit = 0.0;
    for seed in 0..C7_SEEDS {
        let fixture = ToyFixture::new(seed).unwrap();
        limit = 1.1 * fixture.delta_slack / fixture.kappa;
        let cert = fixture.certify(&CertificateConfig::new(fixture.domain.clone()), seed).unwrap();
        if cert.verdict == Verdict::Pass && cert.epsilon_model < cert.epsilon_star {
            certified += 1;
        }
        margin = margin.min(cert.epsilon_star - cert.epsilon_model);
        let mut env = fixture.env.clone();
        let mut policy = env.stabilizer();
        let r = rollout(&mut env, &mut policy, &fixture.closed_loop(true), C7_STEPS, seed).unwrap();
        let tail = r.tail_mean_violation(C7_WINDOW);
        worst_tail = worst_tail.max(tail);
        pass &= tail <= limit;
        rhos.push(lyapunov_decrease_rate(&r.lyapunov).unwrap());
    }
    let rho = mean(&rhos);
    let rho_min = rhos.iter().cloned().fold(f64::INFINITY, f64::min);
    pass &= certified == C7_SEEDS && rho >= C7_RHO_MIN;
    outcome(
        pass,
        format!(
            "toy certificate loop: eps_model < eps* on {certified}/{C7_SEEDS} seeds (min margin {margin:.2e}); \
             worst tail mean d_C {worst_tail:.4} <= {limit:.3} over the last {C7_WINDOW} of {C7_STEPS} steps; \
             rho_Lyap mean {rho:.3} (min {rho_min:.3}, need >= {C7_RHO_MIN})"
        ),
    )
}

// 8. Lipschitz bound and spectral norm.

const C8_PAIRS: usize = 10_000;
const C8_MATRICES: usize = 100;
const C8_SPECTRAL_TOL: f64 = 1e-6;

fn ball_point(rng: &mut ChaCha8Rng, domain: &StateDomain) -> Vec<f64> {
    let d = domain.center.len();
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = domain.radius * rng.random::<f64>().powf(1.0 / d as f64);
    dir.iter().zip(&domain.center).map(|(v, c)| c + r * v / norm).collect()
}

fn lipschitz_violations(lyap: &LyapunovParams, ens: &WorldModelEnsemble, domain: &StateDomain, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let (l_bar, _) = lipschitz_bounds(lyap, ens, domain).unwrap();
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..C8_PAIRS {
        let (s, t) = (ball_point(rng, domain), ball_point(rng, domain));
        let dist = s.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let gap = (lyap.value(&s) - lyap.value(&t)).abs();
        violations += usize::from(gap > l_bar * dist);
        if dist > 0.0 {
            worst = worst.max(gap / (l_bar * dist));
        }
    }
    (violations, worst)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let toy = ToyFixture::new(8).unwrap();
    let (v_toy, w_toy) = lipschitz_violations(&toy.lyapunov, &toy.ensemble, &toy.domain, &mut rng);

    // A random 6-D quadratic with an off-centre domain.
    let d = 6;
    let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let q = &g * g.transpose() + DMatrix::identity(d, d) * 0.1;
    let features = LyapunovParams::spectrally_normalized(DMatrix::from_fn(4, d, |_, _| rng.random_range(-1.0..1.0)));
    let s_safe = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let lyap = LyapunovParams::new(features, 0.8, q, s_safe).unwrap();
    let model = AffineModel::new(DMatrix::identity(d, d), DMatrix::zeros(d, 1), DVector::zeros(d)).unwrap();
    let ens = WorldModelEnsemble::from_members(vec![model]).unwrap();
    let domain = StateDomain { center: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), radius: 3.0 };
    let (v_rand, w_rand) = lipschitz_violations(&lyap, &ens, &domain, &mut rng);

    let mut worst_spec = 0.0f64;
    for k in 0..C8_MATRICES {
        let (r, c) = (rng.random_range(1..40), rng.random_range(1..40));
        let m = DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let oracle = m.clone().svd(false, false).singular_values.max();
        let est = spectral_norm(&m, SPECTRAL_ITERS, SPECTRAL_TOL, k as u64);
        worst_spec = worst_spec.max((est - oracle).abs());
    }
    outcome(
        v_toy == 0 && v_rand == 0 && worst_spec <= C8_SPECTRAL_TOL,
        format!(
            "Lipschitz bound: {v_toy} + {v_rand} violations over 2 x {C8_PAIRS} in-domain pairs (tightest ratio {:.3}); \
             spectral norm worst abs. error {worst_spec:.2e} vs SVD over {C8_MATRICES} matrices (<= {C8_SPECTRAL_TOL:e})",
            w_toy.max(w_rand)
        ),
    )
}

// 9. Reference arithmetic.

/// (coverage, RIW, reported coverage efficiency).
const EFFICIENCY_ROWS: [(f64, f64, f64); 8] = [
    (0.904, 0.58, 1.56),
    (0.908, 0.54, 1.68),
    (0.912, 0.51, 1.79),
    (0.906, 0.50, 1.81),
    (0.906, 0.48, 1.89),
    (0.898, 0.52, 1.73),
    (0.901, 0.49, 1.84),
    (0.914, 0.43, 2.13),
];
const C9_EFF_TOL: f64 = 0.01;
const C9_L_BAR: f64 = 2.41;
const C9_J_BAR: f64 = 1.23;
const C9_EPS_STAR: f64 = 0.089;
const C9_HARMONIC_REPORTED: f64 = 6.4;

fn criterion_9() -> Outcome {
    let worst_eff = EFFICIENCY_ROWS
        .iter()
        .map(|&(c, w, e)| (coverage_efficiency(c, w).unwrap() - e).abs())
        .fold(0.0, f64::max);

    // Back-solve delta + kappa d_bar from the reported threshold, then recompute.
    let (kappa, delta) = (0.5, 0.05);
    let numerator = C9_EPS_STAR * C9_L_BAR * (1.0 + C9_J_BAR);
    let d_bar = (numerator - delta) / kappa;
    let eps = epsilon_star(delta, kappa, d_bar, C9_L_BAR, C9_J_BAR).unwrap();
    let eps_ok = (eps - C9_EPS_STAR).abs() < 5e-4;

    // Euler-Maclaurin expansion as an independent oracle for H_293.
    let m = 293.0f64;
    let euler_gamma = 0.577_215_664_901_532_9;
    let oracle = m.ln() + euler_gamma + 1.0 / (2.0 * m) - 1.0 / (12.0 * m * m) + 1.0 / (120.0 * m.powi(4));
    let c_m = harmonic(293);
    let c_ok = (c_m - oracle).abs() < 1e-12;
    outcome(
        worst_eff <= C9_EFF_TOL && eps_ok && c_ok,
        format!(
            "arithmetic fixtures: Cov.Eff. worst row error {worst_eff:.4} (<= {C9_EFF_TOL}); eps* {eps:.4} from \
             L={C9_L_BAR}, J={C9_J_BAR}, back-solved numerator {numerator:.4} (target {C9_EPS_STAR}); c_293 = {c_m:.6} \
             (oracle {oracle:.6}; reported approx. {C9_HARMONIC_REPORTED} differs by {:.3})",
            C9_HARMONIC_REPORTED - c_m
        ),
    )
}

// 10. Performance budgets.

const C10_BY_BUDGET: Duration = Duration::from_millis(1);
const C10_STEP_BUDGET: Duration = Duration::from_millis(50);

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p: Vec<f64> = (0..293).map(|_| rng.random::<f64>()).collect();
    let by_times: Vec<f64> = (0..2000)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(by_procedure(std::hint::black_box(&p), 0.05).unwrap());
            t.elapsed().as_secs_f64()
        })
        .collect();
    let by_median = median(by_times);

    let comp = prepare_components(&ClosedLoopConfig::default()).unwrap();
    let mut runner = EpisodeRunner::new(&comp, PolicyKind::QueuePressure, true, 0, 0).unwrap();
    for _ in 0..5 {
        runner.step().unwrap();
    }
    let step_times: Vec<f64> = (0..100)
        .map(|_| {
            let t = Instant::now();
            runner.step().unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    let step_max = step_times.iter().cloned().fold(0.0, f64::max);
    let step_median = median(step_times);
    outcome(
        by_median < C10_BY_BUDGET.as_secs_f64() && step_median < C10_STEP_BUDGET.as_secs_f64(),
        format!(
            "performance: BY on m=293 median {:.1} us (< {} ms); closed-loop step at {} cells / {} intersections \
             median {:.2} ms, max {:.2} ms (< {} ms)",
            by_median * 1e6,
            C10_BY_BUDGET.as_millis(),
            comp.geometry.cell_topology.node_count(),
            comp.config.sim.intersection_count(),
            step_median * 1e3,
            step_max * 1e3,
            C10_STEP_BUDGET.as_millis()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    // Numeric arguments select criteria; libtest flags passed by cargo are ignored.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: Vec<_> = criteria
        .into_iter()
        .filter(|(id, _)| selected.is_empty() || selected.contains(id))
        .collect();
    let mut failed = 0;
    for (id, run) in criteria.iter().copied() {
        let o = run();
        println!("criterion {id:>2} {}  {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
