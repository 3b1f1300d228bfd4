mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Tall-and-skinny QR and SVD on a local map/shuffle/reduce engine.
#[derive(Debug, Parser)]
#[command(name = "tsqr", version)]
pub struct Cli {
    /// Concurrent tasks (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Keep stage outputs and shuffle runs under the scratch directory.
    #[arg(long, global = true)]
    pub keep_intermediates: bool,
    /// Scratch directory for engine jobs (default: $TSQR_TMPDIR, then the system temp dir).
    #[arg(long, global = true)]
    pub scratch: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random matrix as a set of record files.
    Generate(GenerateArgs),
    /// Compute a QR factorization.
    Factorize(FactorizeArgs),
    /// Compute an SVD through direct TSQR.
    Svd(SvdArgs),
    /// Fit or evaluate the disk-bandwidth performance model.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Sweep algorithms across condition numbers.
    Stability(StabilityArgs),
    /// Check orthogonality and residual of a factorization.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub rows: u64,
    #[arg(long)]
    pub cols: usize,
    /// Target 2-norm condition number; omit for i.i.d. Gaussian entries.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Singular value profile with --kappa: geometric or two-cluster.
    #[arg(long, default_value = "geometric")]
    pub profile: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub rows_per_partition: usize,
    /// Record format: text or binary.
    #[arg(long, default_value = "binary")]
    pub format: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FaultArgs {
    /// Per-attempt task crash probability.
    #[arg(long, default_value_t = 0.0)]
    pub fault_prob: f64,
    /// Seed for crash draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Re-executions allowed per task.
    #[arg(long, default_value_t = 4)]
    pub max_retries: u32,
}

#[derive(Debug, Args)]
pub struct FactorizeArgs {
    /// Input matrix directory.
    #[arg(long)]
    pub input: PathBuf,
    /// cholesky, indirect-tsqr, direct-tsqr, recursive-direct-tsqr or householder.
    #[arg(long)]
    pub alg: String,
    /// One step of iterative refinement (cholesky and indirect-tsqr only).
    #[arg(long)]
    pub refine: bool,
    /// Skip computing Q.
    #[arg(long)]
    pub no_q: bool,
    /// Output directory for Q, R and stats.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Reduce tasks per indirect TSQR level and for the first Cholesky reduce.
    #[arg(long, default_value_t = 8)]
    pub reducers: usize,
    /// Intermediate reduce levels (indirect-tsqr only).
    #[arg(long)]
    pub tree_levels: Option<usize>,
    /// Stacked-R rows above which recursion happens (recursive-direct-tsqr only).
    #[arg(long)]
    pub recursion_threshold: Option<u64>,
    /// Byte budget for the gathered R factors of direct TSQR.
    #[arg(long, default_value_t = 256 << 20)]
    pub gather_bytes: usize,
    /// Model config; adds the predicted lower bound to the report.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Skip gathering A and Q for ortho_err and residual.
    #[arg(long)]
    pub no_metrics: bool,
    #[command(flatten)]
    pub faults: FaultArgs,
}

#[derive(Debug, Args)]
pub struct SvdArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Only sigma and V^T (two stages).
    #[arg(long)]
    pub values_only: bool,
    /// Output directory for U, sigma.txt, Vt and stats.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256 << 20)]
    pub gather_bytes: usize,
    #[command(flatten)]
    pub faults: FaultArgs,
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Fit inverse bandwidths from streaming measurements or a local benchmark.
    Fit(FitArgs),
    /// Print lower bounds for every algorithm.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// `GB,read_seconds,readwrite_seconds,tasks`; repeatable.
    #[arg(long = "measurement")]
    pub measurements: Vec<String>,
    /// Run a local streaming benchmark over this many bytes instead.
    #[arg(long)]
    pub benchmark_bytes: Option<u64>,
    #[arg(long, default_value_t = 40)]
    pub m_max: u64,
    #[arg(long, default_value_t = 40)]
    pub r_max: u64,
    #[arg(long, default_value_t = 32)]
    pub key_bytes: u64,
    /// Write the config here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// `ROWSxCOLS`; repeatable. Defaults to every shape in the config.
    #[arg(long = "shape")]
    pub shapes: Vec<String>,
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long, default_value_t = 20_000)]
    pub rows: u64,
    #[arg(long, default_value_t = 50)]
    pub cols: usize,
    /// `1e0..1e16` (decades) or a comma list.
    #[arg(long, default_value = "1e0..1e16")]
    pub kappas: String,
    /// Comma list of algorithms.
    #[arg(long, default_value = "cholesky,cholesky-ir,indirect-tsqr,indirect-tsqr-ir,direct-tsqr")]
    pub algorithms: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Repeat with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub repeat: u64,
    #[arg(long, default_value_t = 2_500)]
    pub rows_per_partition: usize,
    #[arg(long, default_value = "geometric")]
    pub profile: String,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-algorithm `kappa ortho_err` files.
    #[arg(long)]
    pub plot_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Original matrix directory.
    #[arg(long)]
    pub a: PathBuf,
    /// Q directory.
    #[arg(long)]
    pub q: PathBuf,
    /// R directory.
    #[arg(long)]
    pub r: PathBuf,
    /// Largest acceptable ortho_err and residual.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}
