//! Test matrices with a prescribed condition number, and the orthogonality and
//! residual metrics swept across algorithms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dense::{local_qr, norm2, DenseError, DenseMatrix, UpperTriangular};
use crate::drivers::{Algorithm, DriverError, DriverOptions, QRResult};
use crate::engine::{Codec, Engine, EngineError};
use crate::matrix::{row_key, PartitionedMatrix};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("invalid matrix spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SingularProfile {
    /// `sigma_j = kappa^(-j/(n-1))`.
    #[default]
    Geometric,
    /// First half at 1, the rest at `1/kappa`.
    TwoCluster,
}

impl std::str::FromStr for SingularProfile {
    type Err = StabilityError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(SingularProfile::Geometric),
            "two-cluster" => Ok(SingularProfile::TwoCluster),
            _ => Err(StabilityError::Spec(format!("unknown singular profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedMatrixSpec {
    pub m: u64,
    pub n: usize,
    pub kappa: f64,
    pub seed: u64,
    pub profile: SingularProfile,
}

impl ConditionedMatrixSpec {
    pub fn new(m: u64, n: usize, kappa: f64, seed: u64) -> Self {
        ConditionedMatrixSpec { m, n, kappa, seed, profile: SingularProfile::Geometric }
    }

    pub fn with_profile(mut self, profile: SingularProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        if self.n == 0 || self.m < self.n as u64 {
            return Err(StabilityError::Spec(format!("need m >= n >= 1, got {}x{}", self.m, self.n)));
        }
        if !self.kappa.is_finite() || self.kappa < 1.0 {
            return Err(StabilityError::Spec(format!("condition number {} must be finite and >= 1", self.kappa)));
        }
        if !(1.0 / self.kappa).is_normal() {
            return Err(StabilityError::Spec(format!("smallest singular value 1/{:e} underflows", self.kappa)));
        }
        if self.n == 1 && self.kappa != 1.0 {
            return Err(StabilityError::Spec("a single column always has condition number 1".into()));
        }
        Ok(())
    }

    /// Target singular values, nonincreasing.
    pub fn singular_values(&self) -> Vec<f64> {
        let n = self.n;
        match self.profile {
            _ if n == 1 => vec![1.0],
            SingularProfile::Geometric => (0..n).map(|j| self.kappa.powf(-(j as f64) / (n - 1) as f64)).collect(),
            SingularProfile::TwoCluster => (0..n).map(|j| if j < n.div_ceil(2) { 1.0 } else { 1.0 / self.kappa }).collect(),
        }
    }
}

fn gaussian_rows(seed: u64, stream: u64, rows: usize, cols: usize) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape")
}

/// Solve `u R = g` for one row.
fn solve_row(g: &[f64], r: &UpperTriangular) -> Vec<f64> {
    let n = g.len();
    let mut u = vec![0.0; n];
    for j in 0..n {
        let mut s = g[j];
        for (i, ui) in u[..j].iter().enumerate() {
            s -= ui * r.get(i, j);
        }
        u[j] = s / r.get(j, j);
    }
    u
}

/// `A = U diag(sigma) V^T`: U is the Q of a seeded Gaussian (two streamed passes,
/// one partition of Gaussian rows regenerated at a time), V from an `n x n` Gaussian.
pub fn gen_conditioned(spec: &ConditionedMatrixSpec, dir: &Path, rows_per_partition: usize) -> Result<PartitionedMatrix, StabilityError> {
    gen_conditioned_as(spec, dir, rows_per_partition, Codec::Rows { cols: spec.n })
}

/// [`gen_conditioned`] written in the given record format.
pub fn gen_conditioned_as(
    spec: &ConditionedMatrixSpec,
    dir: &Path,
    rows_per_partition: usize,
    codec: Codec,
) -> Result<PartitionedMatrix, StabilityError> {
    spec.validate()?;
    if rows_per_partition == 0 {
        return Err(StabilityError::Spec("rows_per_partition must be positive".into()));
    }
    let n = spec.n;
    let m = spec.m;
    let parts = m.div_ceil(rows_per_partition as u64);
    let part_rows = |p: u64| (m - p * rows_per_partition as u64).min(rows_per_partition as u64) as usize;

    let mut r = DenseMatrix::zeros(0, n);
    for p in 0..parts {
        let g = gaussian_rows(spec.seed, p, part_rows(p), n);
        r = local_qr(&DenseMatrix::vstack(&[r, g])?)?.r.into_dense();
    }
    let r = UpperTriangular::from_upper_part(r)?;
    let v = local_qr(&gaussian_rows(spec.seed, u64::MAX, n, n))?.q;
    let sigma = spec.singular_values();
    // rows of diag(sigma) V^T
    let mut svt = v.transpose();
    for (j, s) in sigma.iter().enumerate() {
        svt.row_mut(j).iter_mut().for_each(|x| *x *= s);
    }

    let rows = (0..parts).flat_map(|p| {
        let g = gaussian_rows(spec.seed, p, part_rows(p), n);
        let base = p * rows_per_partition as u64;
        let r = &r;
        let svt = &svt;
        (0..g.rows())
            .map(move |i| {
                let u = solve_row(g.row(i), r);
                (row_key(base + i as u64), svt.left_mul_row(&u))
            })
            .collect::<Vec<_>>()
    });
    Ok(PartitionedMatrix::write_rows(dir, n, rows_per_partition, codec, rows)?)
}

/// i.i.d. standard normal entries, one seeded stream per partition.
pub fn gen_gaussian(m: u64, n: usize, seed: u64, dir: &Path, rows_per_partition: usize, codec: Codec) -> Result<PartitionedMatrix, StabilityError> {
    if n == 0 || m < n as u64 || rows_per_partition == 0 {
        return Err(StabilityError::Spec(format!("need m >= n >= 1 and a positive partition size, got {m}x{n}")));
    }
    let parts = m.div_ceil(rows_per_partition as u64);
    let rows = (0..parts).flat_map(move |p| {
        let base = p * rows_per_partition as u64;
        let g = gaussian_rows(seed, p, (m - base).min(rows_per_partition as u64) as usize, n);
        (0..g.rows()).map(|i| (row_key(base + i as u64), g.row(i).to_vec())).collect::<Vec<_>>()
    });
    Ok(PartitionedMatrix::write_rows(dir, n, rows_per_partition, codec, rows)?)
}

/// One line of the stability table.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub algorithm: String,
    pub kappa: f64,
    /// `||Q^T Q - I||_2`; NaN when failed.
    pub ortho_err: f64,
    /// `||A - QR||_2 / ||R||_2`; NaN when failed.
    pub residual: f64,
    pub failed: bool,
    /// Failure message, if any.
    pub note: Option<String>,
}

pub fn ortho_err(q: &DenseMatrix) -> Result<f64, DenseError> {
    norm2(&q.gram().sub(&DenseMatrix::identity(q.cols()))?)
}

pub fn residual(a: &DenseMatrix, q: &DenseMatrix, r: &UpperTriangular) -> Result<f64, DenseError> {
    norm2(&a.sub(&q.matmul(r.as_dense())?)?).map(|x| x / norm2(r.as_dense()).unwrap_or(f64::NAN))
}

/// Metrics on gathered matrices.
pub fn measure(algorithm: &str, kappa: f64, a: &DenseMatrix, q: &DenseMatrix, r: &UpperTriangular) -> Result<StabilityRow, StabilityError> {
    if q.shape() != a.shape() || r.order() != a.cols() {
        return Err(StabilityError::Spec(format!(
            "shape mismatch: A {:?}, Q {:?}, R order {}",
            a.shape(),
            q.shape(),
            r.order()
        )));
    }
    let row = match (ortho_err(q), residual(a, q, r)) {
        (Ok(o), Ok(res)) if o.is_finite() && res.is_finite() => {
            StabilityRow { algorithm: algorithm.into(), kappa, ortho_err: o, residual: res, failed: false, note: None }
        }
        _ => failed_row(algorithm, kappa, "non-finite Q or R".into()),
    };
    Ok(row)
}

fn failed_row(algorithm: &str, kappa: f64, note: String) -> StabilityRow {
    StabilityRow { algorithm: algorithm.into(), kappa, ortho_err: f64::NAN, residual: f64::NAN, failed: true, note: Some(note) }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub m: u64,
    pub n: usize,
    pub kappas: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
    pub rows_per_partition: usize,
    pub profile: SingularProfile,
    pub options: DriverOptions,
}

impl SweepConfig {
    /// 20000 x 50 in 8 partitions, kappa 1e0..1e16 by decades, the five stability variants.
    pub fn desk(seed: u64) -> Self {
        SweepConfig {
            m: 20_000,
            n: 50,
            kappas: (0..=16).map(|e| 10f64.powi(e)).collect(),
            algorithms: vec![
                Algorithm::Cholesky,
                Algorithm::CholeskyIr,
                Algorithm::Indirect,
                Algorithm::IndirectIr,
                Algorithm::Direct,
            ],
            seed,
            rows_per_partition: 2_500,
            profile: SingularProfile::Geometric,
            options: DriverOptions::default(),
        }
    }
}

/// Run every algorithm on a generated matrix for each kappa. Numerical failures become failed rows.
pub fn sweep(engine: &Engine, cfg: &SweepConfig, scratch: &Path) -> Result<Vec<StabilityRow>, StabilityError> {
    if cfg.kappas.is_empty() {
        return Err(StabilityError::Spec("no condition numbers to sweep".into()));
    }
    let mut rows = Vec::new();
    for (i, &kappa) in cfg.kappas.iter().enumerate() {
        let spec = ConditionedMatrixSpec::new(cfg.m, cfg.n, kappa, cfg.seed).with_profile(cfg.profile);
        let dir = scratch.join(format!("kappa-{i:02}"));
        let a = gen_conditioned(&spec, &dir, cfg.rows_per_partition)?;
        let dense = a.to_dense()?;
        for alg in &cfg.algorithms {
            let row = match alg.run(engine, &a, true, &cfg.options) {
                Ok(res) => measure_result(alg.name(), kappa, &dense, &res)?,
                Err(e) if e.is_numerical() => failed_row(alg.name(), kappa, e.to_string()),
                Err(e) => return Err(e.into()),
            };
            log::info!("{} kappa={:e} ortho={:.3e} residual={:.3e}", row.algorithm, kappa, row.ortho_err, row.residual);
            rows.push(row);
        }
        a.remove_files()?;
        let _ = fs::remove_dir_all(&dir);
    }
    Ok(rows)
}

fn measure_result(name: &str, kappa: f64, a: &DenseMatrix, res: &QRResult) -> Result<StabilityRow, StabilityError> {
    let q = res.q.as_ref().ok_or_else(|| StabilityError::Spec(format!("{name} returned no Q")))?;
    let qd = q.to_dense()?;
    q.remove_files()?;
    measure(name, kappa, a, &qd, &res.r)
}

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.6e}")
    }
}

/// Tab-separated table with a header line.
pub fn to_tsv(rows: &[StabilityRow]) -> String {
    let mut s = String::from("algorithm\tkappa\tortho_err\tresidual\tfailed\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:e}\t{}\t{}\t{}", r.algorithm, r.kappa, fmt_metric(r.ortho_err), fmt_metric(r.residual), r.failed);
    }
    s
}

/// One two-column `kappa ortho_err` file per algorithm, `<algorithm>.dat`. Failed rows are skipped.
pub fn write_plot_data(rows: &[StabilityRow], dir: &Path) -> Result<(), StabilityError> {
    fs::create_dir_all(dir).map_err(|source| StabilityError::Io { path: dir.display().to_string(), source })?;
    let mut names: Vec<&str> = rows.iter().map(|r| r.algorithm.as_str()).collect();
    names.dedup();
    for name in names {
        let mut s = String::new();
        for r in rows.iter().filter(|r| r.algorithm == name && !r.failed) {
            let _ = writeln!(s, "{:e} {:e}", r.kappa, r.ortho_err);
        }
        let path = dir.join(format!("{name}.dat"));
        fs::write(&path, s).map_err(|source| StabilityError::Io { path: path.display().to_string(), source })?;
    }
    Ok(())
}

/// `1e0..1e16` (decades, inclusive) or a comma list such as `1,1e4,1e8`.
pub fn parse_kappas(s: &str) -> Result<Vec<f64>, StabilityError> {
    let bad = || StabilityError::Spec(format!("cannot parse condition numbers {s:?}"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
        if !(lo >= 1.0 && hi >= lo) {
            return Err(bad());
        }
        let (a, b) = (lo.log10().round() as i32, hi.log10().round() as i32);
        return Ok((a..=b).map(|e| 10f64.powi(e)).collect());
    }
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}
