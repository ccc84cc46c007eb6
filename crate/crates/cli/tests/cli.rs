//! End-to-end runs of the `feedcap` binary against the bundled models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../models")
        .join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feedcap"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FEEDCAP_SEED")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str], out: &Path) -> Value {
    let res = run(args, out);
    assert!(
        res.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = fs::read_to_string(out.join("summary.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect()
}

#[test]
fn capacity_respects_budget() {
    let dir = TempDir::new().unwrap();
    let arma = model("arma.json");
    let s = run_ok(
        &[
            "capacity",
            "--model",
            arma.to_str().unwrap(),
            "--kappa",
            "1",
            "--n",
            "3",
        ],
        dir.path(),
    );
    let value = s["value"].as_f64().unwrap();
    let power = s["avg_power"].as_f64().unwrap();
    assert!(value > 0.0);
    assert!(power <= 1.0 + 1e-9);
    assert_eq!(s["units"], "nats");
    assert_eq!(s["rate_per_step"].as_array().unwrap().len(), 3);

    let results = csv_lines(&dir.path().join("results.csv"));
    assert!(results[0].starts_with("t,"));
    assert_eq!(results.len(), 4);
    // Every non-index field carries 17 significant digits.
    for field in results[1].split(',').skip(1) {
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-');
        let digits = mantissa.chars().filter(char::is_ascii_digit).count();
        assert_eq!(digits, 17, "{field}");
    }
    assert!(dir.path().join("plotdata.csv").exists());
}

#[test]
fn summary_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let m = model("two_driver.json");
    let args = [
        "capacity",
        "--model",
        m.to_str().unwrap(),
        "--kappa",
        "0.5",
        "--n",
        "3",
    ];
    run_ok(&args, a.path());
    run_ok(&args, b.path());
    for name in ["summary.json", "results.csv", "plotdata.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
}

#[test]
fn bits_rescale_rates() {
    let nats = TempDir::new().unwrap();
    let bits = TempDir::new().unwrap();
    let m = model("white.json");
    let args = [
        "capacity",
        "--model",
        m.to_str().unwrap(),
        "--kappa",
        "2",
        "--n",
        "4",
    ];
    let s_nats = run_ok(&args, nats.path());
    let mut with_bits = args.to_vec();
    with_bits.push("--bits");
    let s_bits = run_ok(&with_bits, bits.path());
    assert_eq!(s_bits["units"], "bits");
    let ratio = s_bits["value"].as_f64().unwrap() / s_nats["value"].as_f64().unwrap();
    assert!((ratio - std::f64::consts::LOG2_E).abs() < 1e-12);
}

#[test]
fn oracle_compare_agrees() {
    let dir = TempDir::new().unwrap();
    let m = model("arma.json");
    let s = run_ok(
        &[
            "oracle-compare",
            "--model",
            m.to_str().unwrap(),
            "--kappa",
            "1",
            "--n",
            "2",
        ],
        dir.path(),
    );
    assert!(s["abs_delta"].as_f64().unwrap() < 1e-6);
    assert!(s["unroll_abs_delta"].as_f64().unwrap() < 1e-9);
    let matrix = csv_lines(&dir.path().join("matrix_form_strategy.csv"));
    assert!(matrix[0].starts_with("matrix,row,col_1"));
}

#[test]
fn oracle_compare_rejects_long_horizon() {
    let dir = TempDir::new().unwrap();
    let m = model("white.json");
    let res = run(
        &[
            "oracle-compare",
            "--model",
            m.to_str().unwrap(),
            "--kappa",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn filter_reports_entropy() {
    let dir = TempDir::new().unwrap();
    let m = model("white.json");
    let s = run_ok(&["filter", "--model", m.to_str().unwrap()], dir.path());
    assert_eq!(s["n"], 10);
    let h = s["noise_entropy"].as_f64().unwrap();
    let log_det = s["log_det_noise_cov"].as_f64().unwrap();
    let expected = 0.5 * log_det + 5.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((h - expected).abs() < 1e-9);
}

#[test]
fn steady_state_converges() {
    let dir = TempDir::new().unwrap();
    let m = model("two_driver.json");
    let s = run_ok(
        &[
            "steady-state",
            "--model",
            m.to_str().unwrap(),
            "--lambda",
            "0.5",
            "--dither",
            "0.3",
        ],
        dir.path(),
    );
    assert_eq!(s["converged"], true);
    assert!(s["sigma"].is_array() || s["sigma"].is_number());
    assert!(s["steady_rate_per_step"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_matches_analytic_rate() {
    let dir = TempDir::new().unwrap();
    let m = model("arma.json");
    let s = run_ok(
        &[
            "simulate",
            "--model",
            m.to_str().unwrap(),
            "--kappa",
            "1",
            "--n",
            "3",
            "--samples",
            "10000",
            "--trace",
        ],
        dir.path(),
    );
    assert_eq!(s["samples"], 10000);
    let rate = s["empirical_rate"].as_f64().unwrap();
    let se = s["empirical_rate_std_error"].as_f64().unwrap();
    let value = s["value"].as_f64().unwrap();
    assert!((rate - value).abs() < 5.0 * se + 1e-3, "{rate} vs {value}");
    let trace = csv_lines(&dir.path().join("trace.csv"));
    assert!(trace[0].starts_with("sample,t,"));
    assert_eq!(trace.len(), 1 + 3 * 10_000);
}

#[test]
fn asymptotic_lists_horizons() {
    let dir = TempDir::new().unwrap();
    let m = model("two_driver.json");
    let s = run_ok(
        &[
            "asymptotic",
            "--model",
            m.to_str().unwrap(),
            "--kappa",
            "1",
            "--horizons",
            "1,2,3",
        ],
        dir.path(),
    );
    assert_eq!(s["horizons"].as_array().unwrap().len(), 3);
    let per_step = s["capacity_per_step"].as_array().unwrap();
    assert!(per_step.iter().all(|v| v.as_f64().unwrap() > 0.0));
}

#[test]
fn missing_model_is_reported() {
    let dir = TempDir::new().unwrap();
    let res = run(&["filter", "--model", "no_such_model.json"], dir.path());
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("model file not found"), "{err}");
}

#[test]
fn malformed_model_names_the_problem() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        "{\n  \"n\": 2,\n  \"n_s\": 1,\n  \"n_w\": 1,\n  \"A\": [[0.5]] oops\n}\n",
    )
    .unwrap();
    let res = run(&["filter", "--model", bad.to_str().unwrap()], dir.path());
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 5"), "{err}");

    fs::write(
        &bad,
        r#"{"n": 2, "n_s": 1, "n_w": 1, "A": [[[0.5, 1.0]]], "B": [[[1.0]]],
            "C": [[[1.0]], [[1.0]]], "N": [[[0.0]], [[0.0]]], "K_W": [[[1.0]], [[1.0]]],
            "K_S1": [[1.0]]}"#,
    )
    .unwrap();
    let res = run(&["filter", "--model", bad.to_str().unwrap()], dir.path());
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("A[1]"), "{err}");
}

#[test]
fn negative_budget_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    let m = model("arma.json");
    let res = run(
        &["capacity", "--model", m.to_str().unwrap(), "--kappa", "-1"],
        dir.path(),
    );
    assert_eq!(res.status.code(), Some(1));
}
