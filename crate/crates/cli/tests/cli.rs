use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tsafe_core::control::epsilon_star;

fn tsafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsafe")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const FAST: &str = r#"{"steps": 800, "detector": {"het": {"iterations": 200}}}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn generated(dir: &Path) -> String {
    let cfg = write_config(dir, FAST);
    let o = tsafe(&["--config", &cfg, "--out", dir.to_str().unwrap(), "generate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    cfg
}

#[test]
fn generate_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = tsafe(&["--seed", "7", "--out", d.path().to_str().unwrap(), "generate", "--steps", "500"]);
        assert_eq!(code(&o), 0);
    }
    for f in ["flows.csv", "anomaly_mask.csv", "split.json", "coverage.json", "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let cfg = json(&a.path().join("config.json"));
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["grid_size"], 4);
}

#[test]
fn missing_output_dir_is_a_config_error() {
    let o = tsafe(&["--out", "/nonexistent/tsafe-out", "generate"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    for text in [r#"{"stepz": 10}"#, r#"{"sim": {"grid": 4}}"#, "not json"] {
        let cfg = write_config(d.path(), text);
        let o = tsafe(&["--config", &cfg, "--out", d.path().to_str().unwrap(), "generate"]);
        assert_eq!(code(&o), 2, "{text}");
    }
    let o = tsafe(&["--config", "/nonexistent.json", "generate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn calibrate_detect_audit_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cfg = generated(d.path());

    let o = tsafe(&["--config", &cfg, "--out", out, "calibrate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ledger = fs::read(d.path().join("ledger.json")).unwrap();
    let report = json(&d.path().join("coverage_report.json"));
    assert!((report["nominal"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    let cov = report["coverage"].as_f64().unwrap();
    assert!(cov > 0.75 && cov <= 1.0, "{cov}");
    let rel = fs::read_to_string(d.path().join("reliability.csv")).unwrap();
    assert_eq!(rel.lines().next(), Some("nominal,empirical"));
    assert_eq!(rel.lines().count(), 10);
    let ledger_json = json(&d.path().join("ledger.json"));
    assert_eq!(ledger_json["ledger"]["clusters"].as_array().unwrap().len(), 15);
    let test_steps = report["test_end"].as_u64().unwrap() - report["test_start"].as_u64().unwrap();
    let iv = fs::read_to_string(d.path().join("intervals.csv")).unwrap();
    assert_eq!(iv.lines().next(), Some("time,node,L,U"));
    assert_eq!(iv.lines().count() as u64, test_steps * 293 + 1);

    // Same inputs, same ledger.
    assert_eq!(code(&tsafe(&["--config", &cfg, "--out", out, "calibrate"])), 0);
    assert_eq!(fs::read(d.path().join("ledger.json")).unwrap(), ledger);

    let o = tsafe(&["--out", out, "detect"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let det = json(&d.path().join("detection_report.json"));
    assert_eq!(det["alpha"], 0.05);
    assert_eq!(det["trim"], 0.02);
    assert!(det["by"]["rejections"].as_u64().unwrap() <= det["bh"]["rejections"].as_u64().unwrap());
    let steps = det["test_end"].as_u64().unwrap() - det["test_start"].as_u64().unwrap();
    let pv = fs::read_to_string(d.path().join("pvalues.csv")).unwrap();
    assert_eq!(pv.lines().next(), Some("time,node,p_value"));
    assert_eq!(pv.lines().count() as u64, steps * 293 + 1);
    let agg = fs::read_to_string(d.path().join("aggregates.csv")).unwrap();
    assert_eq!(agg.lines().next(), Some("time,intersection,mu,sigma,p,flag"));
    assert_eq!(agg.lines().count() as u64, steps * 16 + 1);

    let o = tsafe(&["--out", out, "detect", "--trim", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&d.path().join("detection_report.json"))["trim"], 0.0);

    let o = tsafe(&["--out", out, "audit-fdr", "--replicates", "100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dep = json(&d.path().join("dependence_report.json"));
    assert_eq!(dep["replicates"], 100);
    assert_eq!(dep["blocks"].as_array().unwrap().len(), 9);
}

#[test]
fn detect_with_empty_test_segment_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cfg = generated(d.path());
    assert_eq!(code(&tsafe(&["--config", &cfg, "--out", out, "calibrate"])), 0);
    let mut split = json(&d.path().join("split.json"));
    split["test"]["start"] = split["test"]["end"].clone();
    fs::write(d.path().join("split.json"), serde_json::to_vec(&split).unwrap()).unwrap();
    assert_eq!(code(&tsafe(&["--out", out, "detect"])), 2);
}

#[test]
fn audit_on_tiny_panel_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cfg = generated(d.path());
    assert_eq!(code(&tsafe(&["--config", &cfg, "--out", out, "calibrate"])), 0);
    assert_eq!(code(&tsafe(&["--out", out, "detect"])), 0);
    let pv = fs::read_to_string(d.path().join("pvalues.csv")).unwrap();
    let tiny: Vec<&str> = pv.lines().take(1 + 3 * 293).collect();
    fs::write(d.path().join("pvalues.csv"), tiny.join("\n")).unwrap();
    assert_eq!(code(&tsafe(&["--out", out, "audit-fdr", "--replicates", "100"])), 2);
    assert_eq!(code(&tsafe(&["--out", out, "audit-fdr", "--replicates", "10"])), 2);
}

#[test]
fn commands_need_their_inputs() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    for cmd in ["calibrate", "detect", "audit-fdr"] {
        assert_eq!(code(&tsafe(&["--out", out, cmd])), 2, "{cmd}");
    }
}

#[test]
fn toy_certificate_passes_and_echoes_its_arithmetic() {
    let d = tempfile::tempdir().unwrap();
    let o = tsafe(&["--out", d.path().to_str().unwrap(), "certify", "--toy"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    for key in ["eps_model", "L_bar", "J_bar", "eps_star", "verdict"] {
        assert!(stdout.contains(key), "{stdout}");
    }
    let c = json(&d.path().join("certificate.json"));
    assert_eq!(c["verdict"], "pass");
    let f = |k: &str| c[k].as_f64().unwrap();
    let eps = epsilon_star(f("delta_slack"), f("kappa"), f("d_bar_c"), f("l_bar"), f("j_bar")).unwrap();
    assert_eq!(eps, f("epsilon_star"));
    assert!(f("epsilon_model") < f("epsilon_star"));
    let rounds = c["rounds"].as_array().unwrap();
    assert!(!rounds.is_empty() && rounds.len() <= 3);
    assert_eq!(rounds[0]["d_bar_c"], 1.0);
}

const SMALL_LOOP: &str = r#"{"closed_loop": {"warmup_steps": 800, "episodes": 1, "episode_steps": 30, "detector": {"het": {"iterations": 200}}}}"#;

#[test]
fn simulate_writes_trajectory_and_metrics() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let cfg = write_config(d.path(), SMALL_LOOP);
    let o = tsafe(&["--config", &cfg, "--out", out, "simulate", "--seeds", "2", "--policy", "random"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&d.path().join("metrics.json"));
    assert_eq!(m["seeds"], serde_json::json!([0, 1]));
    assert_eq!(m["policy"], "random");
    assert_eq!(m["filter"], true);
    for k in ["mean_reward", "violations_per_episode", "safety_pct", "rho_lyap"] {
        assert!(m[k]["mean"].is_number() && m[k]["ci95"].is_number(), "{k}");
    }
    let traj = fs::read_to_string(d.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 2 * 30);
    assert!(traj.starts_with("seed,episode,t,s0,"));

    assert_eq!(code(&tsafe(&["--config", &cfg, "--out", out, "simulate", "--seeds", "0"])), 2);
    assert_eq!(code(&tsafe(&["--out", out, "simulate", "--filter", "maybe"])), 2);
}

#[test]
fn filter_does_not_lower_safety_on_paired_seeds() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let safety = |filter: &str| {
        let o = tsafe(&["--out", out, "simulate", "--seeds", "3", "--policy", "random", "--filter", filter]);
        assert_eq!(code(&o), 0);
        json(&d.path().join("metrics.json"))["safety_pct"]["mean"].as_f64().unwrap()
    };
    let off = safety("off");
    let on = safety("on");
    assert!(on >= off, "safety on {on} < off {off}");
}
