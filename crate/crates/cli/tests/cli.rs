use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tsqr_core::PartitionedMatrix;

fn tsqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsqr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tsqr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tsqr(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn field(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in report:\n{report}"))
        .parse()
        .unwrap()
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/icme.cfg")
}

#[test]
fn generate_small_gaussian() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("a");
    ok(&["generate", "--rows", "8", "--cols", "2", "--seed", "1", "--format", "text", "--out", p(&out)]);
    let m = PartitionedMatrix::open(&out).unwrap();
    assert_eq!((m.rows(), m.cols()), (8, 2));
    assert_eq!(m.to_dense().unwrap().rows(), 8);
}

#[test]
fn generate_rejects_wide_shape() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["generate", "--rows", "2", "--cols", "3", "--out", p(&d.path().join("a"))]), 2);
}

#[test]
fn generate_factorize_verify_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let out = d.path().join("qr");
    ok(&["generate", "--rows", "10000", "--cols", "8", "--rows-per-partition", "1000", "--out", p(&a)]);
    let report = ok(&["--workers", "4", "factorize", "--alg", "direct-tsqr", "--input", p(&a), "--out", p(&out)]);
    assert!(field(&report, "ortho_err") <= 1e-13);
    assert_eq!(field(&report, "passes_over_a"), 2.0);
    assert_eq!(fs::read_to_string(out.join("stats.txt")).unwrap(), report);
    let v = ok(&["verify", "--a", p(&a), "--q", p(&out.join("Q")), "--r", p(&out.join("R"))]);
    assert!(v.contains("status = ok"));
}

#[test]
fn cholesky_with_refinement_at_1e6() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "5000", "--cols", "10", "--kappa", "1e6", "--rows-per-partition", "500", "--out", p(&a)]);
    let report = ok(&["factorize", "--alg", "cholesky", "--refine", "--input", p(&a), "--out", p(&d.path().join("qr"))]);
    assert!(field(&report, "ortho_err") <= 1e-13, "{report}");
}

#[test]
fn cholesky_failure_is_numerical() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "2000", "--cols", "10", "--kappa", "1e12", "--rows-per-partition", "500", "--out", p(&a)]);
    let out = tsqr(&["factorize", "--alg", "cholesky", "--input", p(&a), "--out", p(&d.path().join("qr"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pivot"));
}

#[test]
fn faulty_runs_are_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "4000", "--cols", "6", "--rows-per-partition", "250", "--out", p(&a)]);
    let run = |name: &str| {
        let out = d.path().join(name);
        let report = ok(&[
            "factorize", "--alg", "indirect-tsqr", "--fault-prob", "0.125", "--seed", "7", "--input", p(&a), "--out", p(&out),
        ]);
        (fs::read(out.join("R/part-00000.rec")).unwrap(), field(&report, "failed_attempts"))
    };
    let (r1, f1) = run("one");
    let (r2, f2) = run("two");
    assert_eq!(r1, r2);
    assert_eq!(f1, f2);
    assert!(f1 > 0.0);
}

#[test]
fn flag_combinations() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "100", "--cols", "3", "--out", p(&a)]);
    let out = p(&d.path().join("o")).to_string();
    assert_eq!(code(&["factorize", "--alg", "nonsense", "--input", p(&a), "--out", &out]), 2);
    assert_eq!(code(&["factorize", "--alg", "direct-tsqr", "--refine", "--input", p(&a), "--out", &out]), 2);
    assert_eq!(code(&["factorize", "--alg", "direct-tsqr", "--tree-levels", "2", "--input", p(&a), "--out", &out]), 2);
    assert_eq!(code(&["factorize", "--alg", "direct-tsqr", "--fault-prob", "1.5", "--input", p(&a), "--out", &out]), 2);
    assert_eq!(code(&["factorize", "--alg", "direct-tsqr", "--input", p(&d.path().join("missing")), "--out", &out]), 4);
    assert_eq!(code(&["factorize", "--bogus-flag"]), 2);
}

#[test]
fn svd_recovers_generator_sigma() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "3000", "--cols", "6", "--kappa", "1e3", "--seed", "3", "--rows-per-partition", "500", "--out", p(&a)]);
    let out = d.path().join("svd");
    let report = ok(&["svd", "--input", p(&a), "--out", p(&out)]);
    assert_eq!(field(&report, "stages"), 3.0);
    let sigma: Vec<f64> = fs::read_to_string(out.join("sigma.txt")).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    for (j, s) in sigma.iter().enumerate() {
        let want = 1e3f64.powf(-(j as f64) / 5.0);
        assert!((s - want).abs() <= 1e-10 * want, "{s} vs {want}");
    }
    assert!(out.join("U").join("matrix.toml").exists());

    let vo = ok(&["svd", "--values-only", "--input", p(&a), "--out", p(&d.path().join("vo"))]);
    assert_eq!(field(&vo, "stages"), 2.0);
}

#[test]
fn svd_single_column_is_norm() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "50", "--cols", "1", "--rows-per-partition", "10", "--out", p(&a)]);
    let norm = PartitionedMatrix::open(&a).unwrap().to_dense().unwrap().frobenius_norm();
    let out = d.path().join("svd");
    ok(&["svd", "--input", p(&a), "--out", p(&out)]);
    let s: f64 = fs::read_to_string(out.join("sigma.txt")).unwrap().trim().parse().unwrap();
    assert!((s - norm).abs() <= 1e-13 * norm);
}

#[test]
fn model_predict_and_fit() {
    let table = ok(&["model", "predict", "--shape", "2500000000x10", "--config", p(&config())]);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[..3], ["2500000000", "10", "1645"]);
    let all = ok(&["model", "predict", "--config", p(&config())]);
    assert_eq!(all.lines().count(), 6);

    let fitted = ok(&["model", "fit", "--measurement", "193.1,309,909,40"]);
    let beta = |k: &str| -> f64 {
        fitted.lines().find_map(|l| l.strip_prefix(&format!("{k} = "))).unwrap().parse().unwrap()
    };
    assert!((beta("beta_r") - 1.6002).abs() < 5e-5);
    assert!((beta("beta_w") - 3.1072).abs() < 5e-5);
    assert_eq!(code(&["model", "fit"]), 2);
    assert_eq!(code(&["model", "predict", "--shape", "12", "--config", p(&config())]), 2);
}

#[test]
fn model_config_feeds_factorize_report() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "200", "--cols", "4", "--out", p(&a)]);
    let report = ok(&[
        "factorize", "--alg", "householder", "--input", p(&a), "--out", p(&d.path().join("o")), "--model-config", p(&config()),
    ]);
    assert!(field(&report, "predicted_lower_bound_seconds") > 0.0);
    assert_eq!(field(&report, "passes_over_a"), 16.0);
}

#[test]
fn stability_table() {
    let d = tempfile::tempdir().unwrap();
    let plots = d.path().join("plots");
    let table = ok(&[
        "stability", "--rows", "400", "--cols", "5", "--kappas", "1e0..1e12", "--algorithms", "cholesky,direct-tsqr",
        "--rows-per-partition", "100", "--plot-dir", p(&plots),
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "algorithm\tkappa\tortho_err\tresidual\tfailed");
    assert_eq!(lines.len(), 1 + 13 * 2);
    assert!(plots.join("direct-tsqr.dat").exists());
    assert_eq!(code(&["stability", "--kappas", "1e5..1e1"]), 2);
}

#[test]
fn verify_rejects_non_orthogonal_q() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&["generate", "--rows", "100", "--cols", "3", "--rows-per-partition", "40", "--out", p(&a)]);
    // A itself is not orthogonal, so using it as Q must fail
    let out = d.path().join("qr");
    ok(&["factorize", "--alg", "householder", "--input", p(&a), "--out", p(&out)]);
    assert_eq!(code(&["verify", "--a", p(&a), "--q", p(&a), "--r", p(&out.join("R"))]), 3);
    assert_eq!(code(&["verify", "--a", p(&a), "--q", p(&out.join("Q")), "--r", p(&out.join("R"))]), 0);
}
