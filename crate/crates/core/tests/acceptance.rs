//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsqr_core::dense::local_qr;
use tsqr_core::drivers::{direct_svd, direct_tsqr, householder_qr, Algorithm, DriverOptions, SvdMode};
use tsqr_core::engine::{Codec, Engine, EngineConfig, FaultPolicy};
use tsqr_core::model::{byte_counts, predict, reconcile, Direction, ModelAlgorithm, ModelConfig, Phase, PREDICTION_COLUMNS};
use tsqr_core::stability::{gen_conditioned, ortho_err, sweep, ConditionedMatrixSpec, StabilityRow, SweepConfig};
use tsqr_core::{DenseMatrix, PartitionedMatrix};

struct Suite {
    failures: Vec<String>,
}

impl Suite {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures.push(id.to_string());
        }
    }

    fn timed(&mut self, id: &str, elapsed: Duration, limit: Duration) {
        self.check(id, elapsed <= limit, format!("{:.2}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs()));
    }
}

fn engine(root: &Path, faults: FaultPolicy) -> Engine {
    Engine::new(EngineConfig::default().with_workers(8).with_faults(faults).with_scratch_root(root)).unwrap()
}

fn worst(rows: &[&StabilityRow], f: impl Fn(&StabilityRow) -> f64) -> f64 {
    rows.iter().map(|r| f(r)).fold(0.0, f64::max)
}

fn criterion_1(s: &mut Suite, tmp: &Path) {
    let start = Instant::now();
    let eng = engine(&tmp.join("c1"), FaultPolicy::none());
    let mut all = Vec::new();
    for seed in [1, 2, 3] {
        all.extend(sweep(&eng, &SweepConfig::desk(seed), &tmp.join(format!("c1-{seed}"))).unwrap());
    }
    let pick = |alg: Algorithm, lo: f64, hi: f64| -> Vec<&StabilityRow> {
        all.iter().filter(|r| r.algorithm == alg.name() && r.kappa >= lo && r.kappa <= hi).collect()
    };

    let direct = pick(Algorithm::Direct, 1.0, 1e16);
    let bad = direct.iter().filter(|r| r.failed || r.ortho_err > 1e-13).count();
    s.check(
        "1a direct ortho_err <= 1e-13, kappa 1e0..1e16",
        bad == 0 && direct.len() == 51,
        format!("max {:.3e} over {} runs", worst(&direct, |r| r.ortho_err), direct.len()),
    );

    let chol = pick(Algorithm::Cholesky, 1e8, 1e16);
    let failed = chol.iter().filter(|r| r.failed).count();
    let ok = chol.iter().all(|r| r.failed || r.ortho_err >= 1e-2);
    let min_ok = chol.iter().filter(|r| !r.failed).map(|r| r.ortho_err).fold(f64::INFINITY, f64::min);
    s.check(
        "1b cholesky fails or ortho_err >= 1e-2 for kappa >= 1e8",
        ok && !chol.is_empty(),
        format!("{failed}/{} definiteness failures, smallest completed ortho_err {min_ok:.3e}", chol.len()),
    );

    let mut growth = Vec::new();
    for seed in 0..3 {
        let at = |k: f64| pick(Algorithm::Indirect, k, k)[seed].ortho_err;
        growth.push(at(1e10) / at(1e2));
    }
    let min_growth = growth.iter().copied().fold(f64::INFINITY, f64::min);
    s.check("1c indirect ortho_err(1e10) >= 1e4 x ortho_err(1e2)", min_growth >= 1e4, format!("smallest ratio {min_growth:.3e}"));

    let low = pick(Algorithm::IndirectIr, 1.0, 1e10);
    let high = pick(Algorithm::IndirectIr, 1e16, 1e16);
    let low_max = if low.iter().any(|r| r.failed) { f64::INFINITY } else { worst(&low, |r| r.ortho_err) };
    let high_min = high.iter().map(|r| if r.failed { f64::INFINITY } else { r.ortho_err }).fold(f64::INFINITY, f64::min);
    s.check(
        "1d indirect+ir ortho_err <= 1e-13 for kappa <= 1e10",
        low_max <= 1e-13,
        format!("max {low_max:.3e} over {} runs", low.len()),
    );
    s.check(
        "1d indirect+ir ortho_err >= 1e-8 at kappa 1e16",
        high_min >= 1e-8,
        format!(
            "values {}",
            high.iter().map(|r| format!("{:.3e}", r.ortho_err)).collect::<Vec<_>>().join(", ")
        ),
    );

    let done: Vec<&StabilityRow> = all.iter().filter(|r| !r.failed).collect();
    let res_max = worst(&done, |r| r.residual);
    s.check("1e residual <= 1e-12 for every algorithm and kappa", res_max <= 1e-12, format!("max {res_max:.3e} over {} completed runs", done.len()));
    s.timed("1 runtime", start.elapsed(), Duration::from_secs(300));
}

const TABLE: [(u64, u64, [f64; 6]); 5] = [
    (4_000_000_000, 4, [1803.0, 1803.0, 3606.0, 3606.0, 2528.0, 7213.0]),
    (2_500_000_000, 10, [1645.0, 1645.0, 3290.0, 3290.0, 2464.0, 16448.0]),
    (600_000_000, 25, [804.0, 804.0, 1609.0, 1609.0, 1236.0, 20111.0]),
    (500_000_000, 50, [1240.0, 1240.0, 2480.0, 2480.0, 2095.0, 61989.0]),
    (150_000_000, 100, [696.0, 696.0, 1392.0, 1392.0, 1335.0, 69569.0]),
];

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/icme.cfg")
}

fn criterion_2(s: &mut Suite) {
    let start = Instant::now();
    let cfg = ModelConfig::load(&config_path()).unwrap();
    let direct_col = 4;
    let mut outside = Vec::new();
    let mut direct_dev = Vec::new();
    let mut worst_dev = 0.0f64;
    for (m, n, want) in TABLE {
        let row = predict(&cfg, m, n).unwrap();
        for (c, (got, want)) in row.values().iter().zip(want).enumerate() {
            let dev = got / want - 1.0;
            if c == direct_col {
                direct_dev.push(format!("{m}x{n} {:+.2}%", 100.0 * dev));
                continue;
            }
            worst_dev = worst_dev.max(dev.abs());
            if dev.abs() > 0.02 {
                outside.push(format!("{m}x{n} {} {got:.0} vs {want:.0} ({:+.2}%)", PREDICTION_COLUMNS[c], 100.0 * dev));
            }
        }
    }
    let detail = if outside.is_empty() {
        format!("max deviation {:.2}%", 100.0 * worst_dev)
    } else {
        format!("outside 2%: {}", outside.join("; "))
    };
    s.check("2 model reproduces table within 2% (non-direct columns)", outside.is_empty(), detail);
    println!("INFO 2 direct-tsqr column deviations: {}", direct_dev.join(", "));
    let householder_vs_direct = TABLE
        .iter()
        .map(|&(m, n, _)| {
            let r = predict(&cfg, m, n).unwrap();
            r.householder / r.direct
        })
        .fold(f64::INFINITY, f64::min);
    println!("INFO 2 smallest householder/direct ratio {householder_vs_direct:.2}");
    s.timed("2 runtime", start.elapsed(), Duration::from_secs(1));
}

fn criterion_3(s: &mut Suite, tmp: &Path) {
    let start = Instant::now();
    let eng = engine(&tmp.join("c3"), FaultPolicy::none());
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let algs = [Algorithm::Cholesky, Algorithm::Indirect, Algorithm::Direct, Algorithm::Householder, Algorithm::Recursive];
    let opts = DriverOptions { recursion_threshold_rows: Some(32), ..Default::default() };
    let mut worst_r = vec![0.0f64; algs.len()];
    let mut worst_q = vec![0.0f64; algs.len()];
    let mut errors = Vec::new();
    for i in 0..50u64 {
        let kappa = 10f64.powf(rng.gen_range(0.0..=3.0));
        let spec = ConditionedMatrixSpec::new(500, 8, kappa, 100 + i);
        let a = gen_conditioned(&spec, &tmp.join(format!("c3-{i}")), 50).unwrap();
        let ad = a.to_dense().unwrap();
        let oracle = local_qr(&ad).unwrap().r;
        for (k, alg) in algs.iter().enumerate() {
            match alg.run(&eng, &a, true, &opts) {
                Ok(res) => {
                    worst_r[k] = worst_r[k].max(res.r.relative_distance(&oracle));
                    if let Some(q) = res.q {
                        worst_q[k] = worst_q[k].max(ortho_err(&q.to_dense().unwrap()).unwrap());
                        q.remove_files().unwrap();
                    }
                }
                Err(e) => errors.push(format!("{alg} on matrix {i}: {e}")),
            }
        }
        a.remove_files().unwrap();
    }
    for (k, alg) in algs.iter().enumerate() {
        s.check(
            &format!("3 {alg} R within 1e-8 of oracle, ortho_err <= 1e-12"),
            worst_r[k] <= 1e-8 && worst_q[k] <= 1e-12 && errors.is_empty(),
            format!("max R distance {:.3e}, max ortho_err {:.3e}, {} errors", worst_r[k], worst_q[k], errors.len()),
        );
    }
    for e in errors {
        println!("INFO 3 {e}");
    }
    s.timed("3 runtime", start.elapsed(), Duration::from_secs(120));
}

fn criterion_4(s: &mut Suite, tmp: &Path) {
    let start = Instant::now();
    let eng = engine(&tmp.join("c4"), FaultPolicy::none());
    let spec = ConditionedMatrixSpec::new(10_000, 8, 1e2, 4);
    let a = gen_conditioned(&spec, &tmp.join("c4-a"), 1_000).unwrap();
    let res = direct_tsqr(&eng, &a, &DriverOptions::default()).unwrap();
    let obs = res.stats.counters();
    let m1 = obs[0].map.tasks;
    let m3 = obs[2].map.tasks;
    let pred = byte_counts(ModelAlgorithm::DirectTsqr, 10_000, 8, m1, m3, 32, 40, 40).unwrap();
    let rep = reconcile(&pred, &obs).unwrap();
    print!("{}", rep.to_text().lines().map(|l| format!("INFO 4 {l}\n")).collect::<String>());
    let r1 = rep.line(1, Phase::Map, Direction::Read).unwrap();
    let w3 = rep.line(3, Phase::Map, Direction::Write).unwrap();
    s.check("4 R^m_1 within 1%", (r1.ratio - 1.0).abs() <= 0.01, format!("observed {} predicted {} ratio {:.5}", r1.observed, r1.predicted, r1.ratio));
    s.check("4 W^m_3 within 1%", (w3.ratio - 1.0).abs() <= 0.01, format!("observed {} predicted {} ratio {:.5}", w3.observed, w3.predicted, w3.ratio));
    let red = &obs[0].reduce;
    let zero = red.bytes_read.total() == 0 && red.bytes_written.total() == 0;
    s.check("4 R^r_1 = W^r_1 = 0", zero, format!("read {} written {}", red.bytes_read.total(), red.bytes_written.total()));
    s.timed("4 runtime", start.elapsed(), Duration::from_secs(30));
}

fn criterion_5(s: &mut Suite, tmp: &Path) {
    let a = DenseMatrix::from_vec(100_000, 10, {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..1_000_000).map(|_| rng.gen_range(-1.0..1.0)).collect()
    })
    .unwrap();
    let m = PartitionedMatrix::write(&tmp.join("c5-a"), &a, 5_000, Codec::Rows { cols: 10 }).unwrap();
    let clean = direct_tsqr(&engine(&tmp.join("c5-clean"), FaultPolicy::none()), &m, &DriverOptions::default()).unwrap();
    let faulty_engine = engine(&tmp.join("c5-faulty"), FaultPolicy::new(0.125, 7).with_max_retries(4));
    let faulty = direct_tsqr(&faulty_engine, &m, &DriverOptions::default());
    match faulty {
        Ok(f) => {
            let diff = clean.r.as_dense().sub(f.r.as_dense()).unwrap().max_abs();
            let crashed: u64 = f.stats.counters().iter().map(|c| c.failed_attempts).sum();
            s.check(
                "5 faulty run R matches fault-free run to 1e-14",
                diff <= 1e-14 && crashed > 0,
                format!("max elementwise difference {diff:.3e}, {crashed} crashed attempts re-executed"),
            );
        }
        Err(e) => s.check("5 faulty run R matches fault-free run to 1e-14", false, format!("run failed: {e}")),
    }
}

fn criterion_6(s: &mut Suite, tmp: &Path) {
    let eng = engine(&tmp.join("c6"), FaultPolicy::none());
    let mut detail = Vec::new();
    let mut ok = true;
    for n in [2usize, 4, 8] {
        let a = gen_conditioned(&ConditionedMatrixSpec::new(400, n, 10.0, n as u64), &tmp.join(format!("c6-{n}")), 100).unwrap();
        let res = householder_qr(&eng, &a, &DriverOptions::default()).unwrap();
        let p = res.stats.passes_over_a();
        ok &= p == 2 * n;
        detail.push(format!("n={n}: {p}"));
    }
    s.check("6 householder passes_over_A = 2n", ok, detail.join(", "));
    let a = gen_conditioned(&ConditionedMatrixSpec::new(4000, 8, 10.0, 6), &tmp.join("c6-d"), 500).unwrap();
    let res = direct_tsqr(&eng, &a, &DriverOptions::default()).unwrap();
    let small: Vec<_> = res.stats.stages.iter().filter(|st| !st.full_pass).collect();
    let small_bytes = small.iter().map(|st| st.counters.total_read()).sum::<u64>();
    let full_bytes = res.stats.stages.iter().filter(|st| st.full_pass).map(|st| st.counters.map.bytes_read.total()).min().unwrap_or(0);
    s.check(
        "6 direct: 2 full passes + 1 small stage",
        res.stats.passes_over_a() == 2 && small.len() == 1 && small_bytes < full_bytes / 10,
        format!("{} full passes, {} small stages reading {small_bytes} bytes", res.stats.passes_over_a(), small.len()),
    );
}

fn criterion_7(s: &mut Suite, tmp: &Path) {
    let eng = engine(&tmp.join("c7"), FaultPolicy::none());
    let mut worst_rel = 0.0f64;
    let mut stages_ok = true;
    for seed in 1..=3u64 {
        let spec = ConditionedMatrixSpec::new(5_000, 10, 1e3, seed);
        let a = gen_conditioned(&spec, &tmp.join(format!("c7-{seed}")), 625).unwrap();
        let res = direct_svd(&eng, &a, SvdMode::Full, &DriverOptions::default()).unwrap();
        for (got, want) in res.sigma.iter().zip(spec.singular_values()) {
            worst_rel = worst_rel.max((got - want).abs() / want);
        }
        stages_ok &= res.stats.stages.len() == 3;
        let u = res.u.unwrap();
        let ud = u.to_dense().unwrap();
        let sv = DenseMatrix::from_diag(&res.sigma).matmul(&res.vt).unwrap();
        let back = a.to_dense().unwrap().sub(&ud.matmul(&sv).unwrap()).unwrap().max_abs();
        stages_ok &= back <= 1e-12;
    }
    s.check(
        "7 direct SVD sigma within 1e-10 relative of construction",
        worst_rel <= 1e-10 && stages_ok,
        format!("max relative error {worst_rel:.3e}"),
    );
    let a = gen_conditioned(&ConditionedMatrixSpec::new(5_000, 10, 1e3, 9), &tmp.join("c7-v"), 625).unwrap();
    let res = direct_svd(&eng, &a, SvdMode::ValuesOnly, &DriverOptions::default()).unwrap();
    s.check("7 values-only runs exactly 2 stages", res.stats.stages.len() == 2 && res.u.is_none(), format!("{} stages", res.stats.stages.len()));
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Suite { failures: Vec::new() };
    criterion_1(&mut s, tmp.path());
    criterion_2(&mut s);
    criterion_3(&mut s, tmp.path());
    criterion_4(&mut s, tmp.path());
    criterion_5(&mut s, tmp.path());
    criterion_6(&mut s, tmp.path());
    criterion_7(&mut s, tmp.path());
    if s.failures.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failing: {}", s.failures.len(), s.failures.join(" | "));
        std::process::exit(1);
    }
}
