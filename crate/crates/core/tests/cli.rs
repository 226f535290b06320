//! End-to-end runs of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pairlmm::cli::FitReport;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairlmm"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// 30 clusters of 4 with a random intercept, two strata of PSUs.
fn clustered_csv(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut s = String::from("y,x,g,stratum,psu\n");
    for g in 0..30 {
        let b = 0.8 * z();
        for _ in 0..4 {
            let x = z();
            let y = 1.0 + 2.0 * x + b + 0.5 * z();
            s.push_str(&format!("{y},{x},{g},s{},{}\n", (g / 3) % 2, g / 3));
        }
    }
    s
}

fn fit_json(dir: &Path, csv: &str, extra: &[&str]) -> (Output, Option<FitReport>) {
    let data = write(dir, "data.csv", csv);
    let out = dir.join("fit.json");
    let mut args = vec![
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = bin(&args);
    let report = std::fs::read_to_string(&out)
        .ok()
        .map(|t| serde_json::from_str(&t).unwrap());
    (o, report)
}

#[test]
fn fit_writes_valid_json_that_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (o, report) = fit_json(
        dir.path(),
        &clustered_csv(1),
        &["--formula", "y ~ x + (1|g)"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = report.unwrap();
    let names: Vec<&str> = report.estimates.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names[..2], ["(Intercept)", "x"]);
    let slope = report.estimates[1].estimate;
    assert!((slope - 2.0).abs() < 0.2, "{slope}");
    // a census has no sampling variance
    assert_eq!(report.estimates[0].sandwich_se, Some(0.0));
    let again: FitReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(again, report);
    assert!(report.result.converged);
}

#[test]
fn missing_values_are_dropped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = clustered_csv(2);
    csv.push_str("NA,0.5,1,s0,0\n2.0,,1,s0,0\n3.0,NaN,2,s1,0\n");
    let (o, report) = fit_json(dir.path(), &csv, &["--formula", "y ~ x + (1|g)"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = report.unwrap();
    assert_eq!(report.rows_read, 123);
    assert_eq!(report.rows_used, 120);
    assert_eq!(report.rows_rejected.get("y"), Some(&1));
    assert_eq!(report.rows_rejected.get("x"), Some(&2));
}

#[test]
fn bad_cell_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = clustered_csv(3);
    csv.push_str("1.0,oops,1,s0,0\n");
    let (o, _) = fit_json(dir.path(), &csv, &["--formula", "y ~ x + (1|g)"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 122"), "{err}");
}

#[test]
fn bad_formula_and_missing_column_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = fit_json(
        dir.path(),
        &clustered_csv(4),
        &["--formula", "y ~ log(x) + (1|g)"],
    );
    assert_eq!(o.status.code(), Some(1));
    let (o, _) = fit_json(
        dir.path(),
        &clustered_csv(4),
        &["--formula", "y ~ w + (1|g)"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("'w'"));
}

#[test]
fn non_convergence_gives_distinct_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let (o, report) = fit_json(
        dir.path(),
        &clustered_csv(5),
        &["--formula", "y ~ x + (1|g)", "--max-evals", "2"],
    );
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(!report.unwrap().result.converged);
}

#[test]
fn pure_noise_residual_sd_matches_sample_sd() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y: Vec<f64> = (0..400)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            3.0 * v
        })
        .collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let mut csv = String::from("y,g\n");
    for (i, v) in y.iter().enumerate() {
        csv.push_str(&format!("{v},{}\n", i / 2));
    }
    let dir = tempfile::tempdir().unwrap();
    let (o, report) = fit_json(
        dir.path(),
        &csv,
        &["--formula", "y ~ 1 + (1|g)", "--pairs", "all"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report.unwrap();
    let total = r.result.sigma.powi(2) + r.result.components[0].sd.powi(2);
    assert!(
        (total.sqrt() / sd - 1.0).abs() < 0.02,
        "{} vs {sd}",
        total.sqrt()
    );
    assert!((r.estimates[0].estimate - mean).abs() < 1e-6 + 0.1 * sd);
}

#[test]
fn design_weights_and_jackknife_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (o, report) = fit_json(
        dir.path(),
        &clustered_csv(7),
        &[
            "--formula",
            "y ~ x + (1|g)",
            "--strata",
            "stratum",
            "--stage",
            "psu:srs:5:20",
            "--se",
            "both",
            "--format",
            "json",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report.unwrap();
    assert!(r
        .estimates
        .iter()
        .all(|e| e.jackknife_se.map_or(true, |s| s.is_finite() && s > 0.0)));
    assert!(r.estimates[1].jackknife_se.is_some());
}

#[test]
fn probs_lists_units_then_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", "psu,h\n1,a\n1,a\n2,a\n3,b\n");
    let out = dir.path().join("p.csv");
    let o = bin(&[
        "probs",
        "--data",
        data.to_str().unwrap(),
        "--strata",
        "h",
        "--stage",
        "psu:srs:2:10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,pi,delta"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[..2], ["2", "2"]);
    assert!((first[2].parse::<f64>().unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn sim_csv_output_has_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = bin(&[
        "sim",
        "--study",
        "twin-subsample",
        "--pops",
        "1",
        "--reps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.starts_with("population,replicate,estimator,parameter"));
    assert!(text.lines().count() > 10);
    assert!(String::from_utf8_lossy(&o.stdout).contains("sim-se"));
}
