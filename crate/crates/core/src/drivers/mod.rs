//! QR and SVD algorithms expressed as stage pipelines over a [`PartitionedMatrix`].

mod cholesky;
mod direct;
mod householder;
mod tsqr;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dense::{DenseError, DenseMatrix, UpperTriangular};
use crate::engine::{
    decode_row, encode_row, ChannelOutput, Codec, Engine, EngineError, Record, RecordFile, RecordStream, RecordWriter,
    TaskCounters, TaskError,
};
use crate::matrix::PartitionedMatrix;

pub use cholesky::cholesky_qr;
pub use direct::{direct_svd, direct_tsqr, recursive_direct_tsqr, SvdMode};
pub use householder::householder_qr;
pub use tsqr::{ar_inverse, indirect_tsqr, indirect_tsqr_r, Refine};

/// Default budget for the rows gathered by a single reduce task.
pub const DEFAULT_GATHER_BYTES: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Engine(EngineError),
    #[error("{stage}: {source}")]
    Numerical {
        stage: String,
        #[source]
        source: DenseError,
    },
    #[error("Cholesky factorization of the Gram matrix failed at pivot {pivot} (estimated condition number {kappa_estimate:.3e})")]
    CholeskyFailed { pivot: usize, kappa_estimate: f64 },
    #[error("column {column} has zero norm; the matrix is rank deficient")]
    RankDeficient { column: usize },
    #[error("gathering {needed} bytes of stacked R factors exceeds the {budget}-byte budget; use the recursive direct TSQR")]
    GatherBudget { needed: usize, budget: usize },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DriverError {
    /// Whether the failure is numerical rather than an I/O or configuration problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, DriverError::Numerical { .. } | DriverError::CholeskyFailed { .. } | DriverError::RankDeficient { .. })
    }
}

impl From<EngineError> for DriverError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::TaskFailed { stage, task, source } => {
                let source = match source.downcast::<DriverError>() {
                    Ok(d) => return *d,
                    Err(s) => s,
                };
                match source.downcast::<DenseError>() {
                    Ok(d) => DriverError::Numerical { stage: format!("stage {stage:?}, task {task}"), source: *d },
                    Err(source) => DriverError::Engine(EngineError::TaskFailed { stage, task, source }),
                }
            }
            other => DriverError::Engine(other),
        }
    }
}

impl From<DenseError> for DriverError {
    fn from(e: DenseError) -> Self {
        DriverError::Numerical { stage: "driver".into(), source: e }
    }
}

/// Counters of one executed stage, tagged with whether it read the full matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStat {
    pub counters: TaskCounters,
    pub full_pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub stages: Vec<StageStat>,
    /// Some diagonal entry of an intermediate or final R fell below the rank tolerance.
    pub rank_deficient: bool,
}

impl RunStats {
    /// Stages that read the full `m x n` data (or a rewritten copy of it).
    pub fn passes_over_a(&self) -> usize {
        self.stages.iter().filter(|s| s.full_pass).count()
    }

    pub fn counters(&self) -> Vec<TaskCounters> {
        self.stages.iter().map(|s| s.counters.clone()).collect()
    }

    pub(crate) fn push(&mut self, counters: TaskCounters, full_pass: bool) {
        self.stages.push(StageStat { counters, full_pass });
    }

    pub(crate) fn extend(&mut self, other: RunStats) {
        self.stages.extend(other.stages);
        self.rank_deficient |= other.rank_deficient;
    }
}

#[derive(Debug, Clone)]
pub struct QRResult {
    /// Same row keys, in the same order, as the input.
    pub q: Option<PartitionedMatrix>,
    /// Sign-normalized: nonnegative diagonal.
    pub r: UpperTriangular,
    pub stats: RunStats,
}

#[derive(Debug, Clone)]
pub struct SVDResult {
    pub u: Option<PartitionedMatrix>,
    /// Nonincreasing and nonnegative.
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
    pub r: UpperTriangular,
    pub stats: RunStats,
}

/// Knobs shared by the drivers.
#[derive(Debug, Clone)]
pub struct DriverOptions {
    /// Reduce tasks for the first reduce of Cholesky QR and for each indirect TSQR tree level.
    pub reducers: usize,
    /// Intermediate reduce levels in the indirect TSQR tree.
    pub tree_levels: usize,
    /// Byte budget for the stacked R factors gathered by the direct TSQR step-2 reducer.
    pub gather_bytes: usize,
    /// Stacked-R rows above which the recursive direct TSQR recurses.
    pub recursion_threshold_rows: Option<u64>,
    /// Materialize Householder Q with `2n` extra passes.
    pub householder_q: bool,
}

impl Default for DriverOptions {
    fn default() -> Self {
        DriverOptions {
            reducers: 8,
            tree_levels: 1,
            gather_bytes: DEFAULT_GATHER_BYTES,
            recursion_threshold_rows: None,
            householder_q: false,
        }
    }
}

/// Algorithm identifiers used by the harness and command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Cholesky,
    CholeskyIr,
    Indirect,
    IndirectIr,
    Direct,
    Recursive,
    Householder,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Cholesky,
        Algorithm::CholeskyIr,
        Algorithm::Indirect,
        Algorithm::IndirectIr,
        Algorithm::Direct,
        Algorithm::Recursive,
        Algorithm::Householder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Cholesky => "cholesky",
            Algorithm::CholeskyIr => "cholesky-ir",
            Algorithm::Indirect => "indirect-tsqr",
            Algorithm::IndirectIr => "indirect-tsqr-ir",
            Algorithm::Direct => "direct-tsqr",
            Algorithm::Recursive => "recursive-direct-tsqr",
            Algorithm::Householder => "householder",
        }
    }

    /// Run the algorithm; `want_q` is ignored by the direct variants, which always produce Q.
    pub fn run(
        &self,
        engine: &Engine,
        a: &PartitionedMatrix,
        want_q: bool,
        opts: &DriverOptions,
    ) -> Result<QRResult, DriverError> {
        match self {
            Algorithm::Cholesky => cholesky_qr(engine, a, want_q, false, opts),
            Algorithm::CholeskyIr => cholesky_qr(engine, a, want_q, true, opts),
            Algorithm::Indirect => indirect_tsqr(engine, a, want_q, false, opts),
            Algorithm::IndirectIr => indirect_tsqr(engine, a, want_q, true, opts),
            Algorithm::Direct => direct_tsqr(engine, a, opts),
            Algorithm::Recursive => {
                let threshold = opts
                    .recursion_threshold_rows
                    .unwrap_or_else(|| (opts.gather_bytes / (8 * a.cols().max(1))) as u64);
                recursive_direct_tsqr(engine, a, threshold, opts)
            }
            Algorithm::Householder => {
                let o = DriverOptions { householder_q: want_q, ..opts.clone() };
                householder_qr(engine, a, &o)
            }
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = DriverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "cholesky-qr" => "cholesky",
            "cholesky+ir" => "cholesky-ir",
            "indirect" => "indirect-tsqr",
            "indirect+ir" | "indirect-ir" => "indirect-tsqr-ir",
            "direct" => "direct-tsqr",
            "recursive" => "recursive-direct-tsqr",
            "householder-qr" => "householder",
            other => other,
        };
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == alias)
            .ok_or_else(|| DriverError::Config(format!("unknown algorithm {s:?}")))
    }
}

/// 8-byte big-endian key: sorts in numeric order.
pub(crate) fn index_key(i: u64) -> [u8; 8] {
    i.to_be_bytes()
}

pub(crate) fn parse_index_key(key: &[u8]) -> Result<u64, TaskError> {
    let b: [u8; 8] = key.try_into().map_err(|_| format!("expected an 8-byte index key, got {} bytes", key.len()))?;
    Ok(u64::from_be_bytes(b))
}

/// Read a task's whole input as `(keys, rows)`, checking the row width.
pub(crate) fn read_block(input: &mut RecordStream<'_>, cols: usize) -> Result<(Vec<Vec<u8>>, DenseMatrix), TaskError> {
    let mut keys = Vec::new();
    let mut data = Vec::new();
    for r in input {
        let r = r?;
        let row = decode_row(&r.value)?;
        if row.len() != cols {
            return Err(format!("row has {} values, expected {cols}", row.len()).into());
        }
        data.extend_from_slice(&row);
        keys.push(r.key);
    }
    let m = DenseMatrix::from_vec(keys.len(), cols, data)?;
    Ok((keys, m))
}

/// Rows of an `n x n` factor keyed by row index, read back from a channel.
pub(crate) fn read_indexed_rows(ch: &ChannelOutput, n: usize) -> Result<DenseMatrix, DriverError> {
    let mut m = DenseMatrix::zeros(n, n);
    let mut seen = vec![false; n];
    for r in ch.read_all()? {
        let i = parse_index_key(&r.key).map_err(|e| DriverError::Integrity(e.to_string()))? as usize;
        let row = r.row()?;
        if i >= n || row.len() != n || seen[i] {
            return Err(DriverError::Integrity(format!("unexpected factor row {i} of width {}", row.len())));
        }
        m.row_mut(i).copy_from_slice(&row);
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(DriverError::Integrity(format!("factor row {i} missing")));
    }
    Ok(m)
}

/// Write a small channel of records into a fresh engine scratch file.
pub(crate) fn write_small(engine: &Engine, name: &str, records: &[Record]) -> Result<ChannelOutput, DriverError> {
    let dir = engine.scratch_dir(name)?;
    let path = dir.join(format!("{name}.rec"));
    let mut w = RecordWriter::create(&path, Codec::Framed)?;
    for r in records {
        w.write_record(r)?;
    }
    let (_, n) = w.finish()?;
    Ok(ChannelOutput::with_file_records(Codec::Framed, vec![RecordFile::new(path, Codec::Framed)], vec![n]))
}

pub(crate) fn indexed_rows(m: &DenseMatrix) -> Vec<Record> {
    (0..m.rows()).map(|i| Record::new(index_key(i as u64).to_vec(), encode_row(m.row(i)))).collect()
}

/// Drop a driver-owned intermediate unless the engine keeps intermediates.
pub(crate) fn discard(engine: &Engine, ch: &ChannelOutput) -> Result<(), DriverError> {
    if !engine.config().keep_intermediates {
        ch.remove_files()?;
    }
    Ok(())
}

pub(crate) fn check_shape(a: &PartitionedMatrix) -> Result<(), DriverError> {
    if a.cols() == 0 || a.rows() < a.cols() as u64 {
        return Err(DriverError::Config(format!(
            "need a tall matrix with at least one column, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}
