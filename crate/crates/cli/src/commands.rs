use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use tsqr_core::drivers::{direct_svd, Algorithm, DriverError, DriverOptions, RunStats, SvdMode};
use tsqr_core::engine::{Codec, Engine, EngineConfig, EngineError, FaultPolicy};
use tsqr_core::model::{self, ModelConfig, ModelError, StreamingMeasurement};
use tsqr_core::stability::{self, ConditionedMatrixSpec, SingularProfile, StabilityError, SweepConfig};
use tsqr_core::{DenseMatrix, PartitionedMatrix, UpperTriangular};

use crate::{Cli, Command, FactorizeArgs, FaultArgs, FitArgs, GenerateArgs, ModelCommand, PredictArgs, StabilityArgs, SvdArgs, VerifyArgs};

/// Bad flags or flag combinations.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Metrics exceeded the verification tolerance.
#[derive(Debug)]
pub struct VerifyFailed(pub String);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

/// 2 usage, 3 numerical, 4 I/O, 1 anything else.
pub fn exit_code(e: &anyhow::Error) -> ExitCode {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return ExitCode::from(2);
        }
        if cause.is::<VerifyFailed>() {
            return ExitCode::from(3);
        }
        if let Some(d) = cause.downcast_ref::<DriverError>() {
            if d.is_numerical() {
                return ExitCode::from(3);
            }
            if matches!(d, DriverError::Config(_) | DriverError::GatherBudget { .. }) {
                return ExitCode::from(2);
            }
        }
        if let Some(EngineError::Config(_)) = cause.downcast_ref::<EngineError>() {
            return ExitCode::from(2);
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return ExitCode::from(2);
        }
        if let Some(StabilityError::Spec(_)) = cause.downcast_ref::<StabilityError>() {
            return ExitCode::from(2);
        }
        if cause.is::<std::io::Error>() || matches!(cause.downcast_ref::<EngineError>(), Some(EngineError::Io { .. } | EngineError::Corrupt { .. })) {
            return ExitCode::from(4);
        }
    }
    ExitCode::from(1)
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Factorize(a) => factorize(cli, a),
        Command::Svd(a) => svd(cli, a),
        Command::Model(ModelCommand::Fit(a)) => fit(cli, a),
        Command::Model(ModelCommand::Predict(a)) => predict(a),
        Command::Stability(a) => stability_sweep(cli, a),
        Command::Verify(a) => verify(a),
    }
}

fn engine(cli: &Cli, faults: Option<&FaultArgs>) -> Result<Engine> {
    let mut cfg = EngineConfig::default();
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        cfg = cfg.with_workers(w);
    }
    if let Some(f) = faults {
        let policy = FaultPolicy::new(f.fault_prob, f.seed).with_max_retries(f.max_retries);
        policy.validate().map_err(usage)?;
        cfg = cfg.with_faults(policy);
    }
    if let Some(s) = &cli.scratch {
        cfg = cfg.with_scratch_root(s);
    }
    cfg.keep_intermediates = cli.keep_intermediates;
    Ok(Engine::new(cfg)?)
}

fn parse_format(name: &str, cols: usize) -> Result<Codec> {
    match name {
        "text" | "binary" => Ok(Codec::parse(name, cols)?),
        other => Err(usage(format!("unknown format {other:?}; use text or binary"))),
    }
}

fn parse_profile(s: &str) -> Result<SingularProfile> {
    s.parse().map_err(|e: StabilityError| usage(e.to_string()))
}

fn generate(a: &GenerateArgs) -> Result<ExitCode> {
    if a.cols == 0 || a.rows < a.cols as u64 {
        return Err(usage(format!("need rows >= cols >= 1, got {}x{}", a.rows, a.cols)));
    }
    let codec = parse_format(&a.format, a.cols)?;
    let m = match a.kappa {
        Some(kappa) => {
            let spec = ConditionedMatrixSpec::new(a.rows, a.cols, kappa, a.seed).with_profile(parse_profile(&a.profile)?);
            stability::gen_conditioned_as(&spec, &a.out, a.rows_per_partition, codec)?
        }
        None => stability::gen_gaussian(a.rows, a.cols, a.seed, &a.out, a.rows_per_partition, codec)?,
    };
    println!("wrote {}x{} in {} partitions to {}", m.rows(), m.cols(), m.partitions().len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn resolve_algorithm(a: &FactorizeArgs) -> Result<Algorithm> {
    let base: Algorithm = a.alg.parse().map_err(|e: DriverError| usage(e.to_string()))?;
    let alg = match (base, a.refine) {
        (alg, false) => alg,
        (Algorithm::Cholesky | Algorithm::CholeskyIr, true) => Algorithm::CholeskyIr,
        (Algorithm::Indirect | Algorithm::IndirectIr, true) => Algorithm::IndirectIr,
        (alg, true) => return Err(usage(format!("--refine does not apply to {alg}"))),
    };
    if a.tree_levels.is_some() && !matches!(alg, Algorithm::Indirect | Algorithm::IndirectIr) {
        return Err(usage("--tree-levels applies only to indirect-tsqr"));
    }
    if a.recursion_threshold.is_some() && alg != Algorithm::Recursive {
        return Err(usage("--recursion-threshold applies only to recursive-direct-tsqr"));
    }
    if a.no_q && matches!(alg, Algorithm::Direct | Algorithm::Recursive) {
        log::warn!("{alg} always produces Q; --no-q only skips writing it");
    }
    Ok(alg)
}

fn stats_block(out: &mut String, stats: &RunStats) {
    let _ = writeln!(out, "stages = {}", stats.stages.len());
    let _ = writeln!(out, "passes_over_a = {}", stats.passes_over_a());
    let _ = writeln!(out, "rank_deficient = {}", stats.rank_deficient);
    let failed: u64 = stats.stages.iter().map(|s| s.counters.failed_attempts).sum();
    let _ = writeln!(out, "failed_attempts = {failed}");
    for (i, s) in stats.stages.iter().enumerate() {
        let c = &s.counters;
        let p = format!("stage.{}", i + 1);
        let _ = writeln!(out, "{p}.name = {}", c.stage);
        let _ = writeln!(out, "{p}.full_pass = {}", s.full_pass);
        let _ = writeln!(out, "{p}.map_tasks = {}", c.map.tasks);
        let _ = writeln!(out, "{p}.map_read_bytes = {}", c.map.bytes_read.total());
        let _ = writeln!(out, "{p}.map_written_bytes = {}", c.map.bytes_written.total());
        let _ = writeln!(out, "{p}.reduce_tasks = {}", c.reduce.tasks);
        let _ = writeln!(out, "{p}.reduce_keys = {}", c.distinct_reduce_keys);
        let _ = writeln!(out, "{p}.reduce_read_bytes = {}", c.reduce.bytes_read.total());
        let _ = writeln!(out, "{p}.reduce_written_bytes = {}", c.reduce.bytes_written.total());
        let _ = writeln!(out, "{p}.failed_attempts = {}", c.failed_attempts);
    }
}

fn write_report(dir: &Path, text: &str) -> Result<()> {
    let path = dir.join("stats.txt");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn factorize(cli: &Cli, a: &FactorizeArgs) -> Result<ExitCode> {
    let alg = resolve_algorithm(a)?;
    let input = PartitionedMatrix::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let model = a.model_config.as_deref().map(ModelConfig::load).transpose()?;
    let eng = engine(cli, Some(&a.faults))?;
    let opts = DriverOptions {
        reducers: a.reducers,
        tree_levels: a.tree_levels.unwrap_or(1),
        gather_bytes: a.gather_bytes,
        recursion_threshold_rows: a.recursion_threshold,
        householder_q: false,
    };
    prepare_out(&a.out)?;
    let start = Instant::now();
    let res = alg.run(&eng, &input, !a.no_q, &opts)?;
    let elapsed = start.elapsed().as_secs_f64();

    let n = input.cols();
    PartitionedMatrix::write(&a.out.join("R"), res.r.as_dense(), n, input.codec())?;
    let q = match res.q {
        Some(q) if !a.no_q => {
            let kept = q.copy_to(&a.out.join("Q"))?;
            q.remove_files()?;
            Some(kept)
        }
        Some(q) => {
            q.remove_files()?;
            None
        }
        None => None,
    };

    let mut r = String::new();
    let _ = writeln!(r, "algorithm = {alg}");
    let _ = writeln!(r, "rows = {}", input.rows());
    let _ = writeln!(r, "cols = {n}");
    let _ = writeln!(r, "partitions = {}", input.partitions().len());
    let _ = writeln!(r, "workers = {}", eng.config().workers);
    let _ = writeln!(r, "elapsed_seconds = {elapsed:.3}");
    if let (Some(q), false) = (&q, a.no_metrics) {
        let (o, res_) = metrics(&input.to_dense()?, &q.to_dense()?, &res.r)?;
        let _ = writeln!(r, "ortho_err = {o:.6e}");
        let _ = writeln!(r, "residual = {res_:.6e}");
    }
    if let Some(cfg) = &model {
        let row = model::predict(cfg, input.rows(), n as u64)?;
        let t = match alg {
            Algorithm::Cholesky => row.cholesky,
            Algorithm::CholeskyIr => row.cholesky_ir,
            Algorithm::Indirect => row.indirect,
            Algorithm::IndirectIr => row.indirect_ir,
            Algorithm::Direct | Algorithm::Recursive => row.direct,
            Algorithm::Householder => row.householder,
        };
        let _ = writeln!(r, "predicted_lower_bound_seconds = {t:.4e}");
    }
    stats_block(&mut r, &res.stats);
    write_report(&a.out, &r)?;
    Ok(ExitCode::SUCCESS)
}

fn metrics(a: &DenseMatrix, q: &DenseMatrix, r: &UpperTriangular) -> Result<(f64, f64)> {
    Ok((stability::ortho_err(q)?, stability::residual(a, q, r)?))
}

fn svd(cli: &Cli, a: &SvdArgs) -> Result<ExitCode> {
    let input = PartitionedMatrix::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let eng = engine(cli, Some(&a.faults))?;
    let opts = DriverOptions { gather_bytes: a.gather_bytes, ..Default::default() };
    let mode = if a.values_only { SvdMode::ValuesOnly } else { SvdMode::Full };
    prepare_out(&a.out)?;
    let res = direct_svd(&eng, &input, mode, &opts)?;
    let n = input.cols();
    let sigma_path = a.out.join("sigma.txt");
    let sigma: String = res.sigma.iter().map(|s| format!("{s:e}\n")).collect();
    fs::write(&sigma_path, sigma).with_context(|| format!("writing {}", sigma_path.display()))?;
    PartitionedMatrix::write(&a.out.join("Vt"), &res.vt, n, input.codec())?;
    if let Some(u) = res.u {
        u.copy_to(&a.out.join("U"))?;
        u.remove_files()?;
    }
    let mut r = String::new();
    let _ = writeln!(r, "mode = {}", if a.values_only { "values-only" } else { "full" });
    let _ = writeln!(r, "rows = {}", input.rows());
    let _ = writeln!(r, "cols = {n}");
    let _ = writeln!(r, "sigma_max = {:e}", res.sigma[0]);
    let _ = writeln!(r, "sigma_min = {:e}", res.sigma[n - 1]);
    stats_block(&mut r, &res.stats);
    write_report(&a.out, &r)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_measurement(s: &str) -> Result<StreamingMeasurement> {
    let f: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || usage(format!("measurement {s:?} is not GB,read_seconds,readwrite_seconds,tasks"));
    if f.len() != 4 {
        return Err(bad());
    }
    let num = |x: &str| x.parse::<f64>().map_err(|_| bad());
    Ok(StreamingMeasurement {
        bytes: num(f[0])? * model::GB,
        read_seconds: num(f[1])?,
        readwrite_seconds: num(f[2])?,
        tasks: f[3].parse().map_err(|_| bad())?,
    })
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<ExitCode> {
    let mut ms = a.measurements.iter().map(|s| parse_measurement(s)).collect::<Result<Vec<_>>>()?;
    if let Some(bytes) = a.benchmark_bytes {
        let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let scratch = cli.scratch.clone().unwrap_or_else(std::env::temp_dir).join("tsqr-stream-bench");
        let m = model::streaming_benchmark(bytes, workers, &scratch)?;
        let _ = fs::remove_dir(&scratch);
        log::info!("benchmark: {:.0} bytes, read {:.3}s, read+write {:.3}s", m.bytes, m.read_seconds, m.readwrite_seconds);
        ms.push(m);
    }
    if ms.is_empty() {
        return Err(usage("give at least one --measurement or --benchmark-bytes"));
    }
    let (br, bw) = model::fit_bandwidth(&ms)?;
    let cfg = ModelConfig {
        m_max: a.m_max,
        r_max: a.r_max,
        key_bytes: a.key_bytes,
        beta_r: br / a.m_max as f64,
        beta_w: bw / a.m_max as f64,
        shapes: Vec::new(),
    };
    let text = cfg.to_text();
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_shape(s: &str) -> Result<(u64, u64)> {
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("shape {s:?} is not ROWSxCOLS")))?;
    let p = |x: &str| x.trim().replace('_', "").parse::<u64>().map_err(|_| usage(format!("shape {s:?} is not ROWSxCOLS")));
    Ok((p(m)?, p(n)?))
}

fn predict(a: &PredictArgs) -> Result<ExitCode> {
    let cfg = ModelConfig::load(&a.config)?;
    let shapes: Vec<(u64, u64)> = if a.shapes.is_empty() {
        cfg.shapes.iter().map(|s| (s.m, s.n)).collect()
    } else {
        a.shapes.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?
    };
    if shapes.is_empty() {
        return Err(usage("no --shape given and the config lists none"));
    }
    let rows = shapes.iter().map(|&(m, n)| model::predict(&cfg, m, n)).collect::<Result<Vec<_>, _>>()?;
    print!("{}", model::prediction_table(&rows));
    Ok(ExitCode::SUCCESS)
}

fn stability_sweep(cli: &Cli, a: &StabilityArgs) -> Result<ExitCode> {
    let kappas = stability::parse_kappas(&a.kappas).map_err(|e| usage(e.to_string()))?;
    let algorithms = a
        .algorithms
        .split(',')
        .map(|s| s.trim().parse::<Algorithm>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if a.repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let eng = engine(cli, None)?;
    let scratch = eng.scratch_dir("stability")?;
    let mut rows = Vec::new();
    for seed in a.seed..a.seed + a.repeat {
        let cfg = SweepConfig {
            m: a.rows,
            n: a.cols,
            kappas: kappas.clone(),
            algorithms: algorithms.clone(),
            seed,
            rows_per_partition: a.rows_per_partition,
            profile: parse_profile(&a.profile)?,
            options: DriverOptions::default(),
        };
        rows.extend(stability::sweep(&eng, &cfg, &scratch)?);
    }
    let table = stability::to_tsv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{table}"),
    }
    if let Some(dir) = &a.plot_dir {
        stability::write_plot_data(&rows, dir)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: &VerifyArgs) -> Result<ExitCode> {
    let open = |p: &Path| PartitionedMatrix::open(p).with_context(|| format!("opening {}", p.display()));
    let (am, qm, rm) = (open(&a.a)?, open(&a.q)?, open(&a.r)?);
    let ad = am.to_dense()?;
    let qd = qm.to_dense()?;
    if qm.keys()? != am.keys()? {
        bail!(VerifyFailed("Q row keys do not match A".into()));
    }
    let r = UpperTriangular::from_dense(rm.to_dense()?).map_err(|e| anyhow!(VerifyFailed(format!("R is not upper triangular: {e}"))))?;
    if qd.shape() != ad.shape() || r.order() != ad.cols() {
        bail!(VerifyFailed(format!("shape mismatch: A {:?}, Q {:?}, R {}x{}", ad.shape(), qd.shape(), r.order(), r.order())));
    }
    let (o, res) = metrics(&ad, &qd, &r)?;
    println!("ortho_err = {o:.6e}");
    println!("residual = {res:.6e}");
    let ok = o <= a.tol && res <= a.tol;
    println!("status = {}", if ok { "ok" } else { "failed" });
    if !ok {
        bail!(VerifyFailed(format!("metrics exceed tolerance {:e}", a.tol)));
    }
    Ok(ExitCode::SUCCESS)
}
