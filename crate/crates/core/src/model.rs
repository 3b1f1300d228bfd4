//! Disk-bandwidth performance model: per-step byte counts, lower bounds on job time,
//! bandwidth fitting from streaming benchmarks, and reconciliation against engine counters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ByteCount, Codec, EngineError, PhaseCounters, RecordFile, RecordWriter, TaskCounters};

/// Bytes per GB in bandwidth arithmetic.
pub const GB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model consistency: {0}")]
    Consistency(String),
    #[error("cannot reconcile {predicted} predicted steps against {observed} observed stages")]
    StepMismatch { predicted: usize, observed: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

/// Cluster description. `beta_r` and `beta_w` are per-task inverse bandwidths in s/GB.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub m_max: u64,
    pub r_max: u64,
    pub beta_r: f64,
    pub beta_w: f64,
    /// Key bytes per record.
    pub key_bytes: u64,
}

impl ClusterParams {
    /// From aggregate inverse bandwidths, i.e. `beta / m_max`, the form streaming benchmarks report.
    pub fn from_aggregate(m_max: u64, r_max: u64, beta_r_agg: f64, beta_w_agg: f64, key_bytes: u64) -> Self {
        ClusterParams { m_max, r_max, beta_r: beta_r_agg * m_max as f64, beta_w: beta_w_agg * m_max as f64, key_bytes }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.m_max == 0 || self.r_max == 0 {
            return Err(ModelError::Config("m_max and r_max must be at least 1".into()));
        }
        if !(self.beta_r > 0.0 && self.beta_w > 0.0) {
            return Err(ModelError::Config("inverse bandwidths must be positive".into()));
        }
        Ok(())
    }
}

/// Bytes moved and task counts for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCost {
    pub rm: u64,
    pub wm: u64,
    pub rr: u64,
    pub wr: u64,
    pub m_tasks: u64,
    pub r_tasks: u64,
    /// Distinct reduce keys.
    pub k_keys: u64,
}

impl StepCost {
    fn map_only(rm: u64, wm: u64, m_tasks: u64) -> Self {
        StepCost { rm, wm, m_tasks, ..Default::default() }
    }

    pub fn map_parallelism(&self, p: &ClusterParams) -> u64 {
        p.m_max.min(self.m_tasks)
    }

    pub fn reduce_parallelism(&self, p: &ClusterParams) -> u64 {
        p.r_max.min(self.r_tasks).min(self.k_keys)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelAlgorithm {
    Cholesky,
    IndirectTsqr,
    DirectTsqr,
    /// One column of Householder QR; the full job repeats it `n` times.
    HouseholderStep,
}

impl FromStr for ModelAlgorithm {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cholesky" => Ok(ModelAlgorithm::Cholesky),
            "indirect" | "indirect-tsqr" => Ok(ModelAlgorithm::IndirectTsqr),
            "direct" | "direct-tsqr" => Ok(ModelAlgorithm::DirectTsqr),
            "householder" | "householder-step" => Ok(ModelAlgorithm::HouseholderStep),
            _ => Err(ModelError::Config(format!("unknown model algorithm {s:?}"))),
        }
    }
}

/// Closed-form byte counts per step. `r1` is the reducer count of the first indirect TSQR
/// reduce; the small middle steps run `m_small` map tasks.
#[allow(clippy::too_many_arguments)]
pub fn byte_counts(alg: ModelAlgorithm, m: u64, n: u64, m1: u64, m3: u64, k: u64, r1: u64, m_small: u64) -> Result<Vec<StepCost>, ModelError> {
    if n == 0 || m < n || m1 == 0 || m3 == 0 {
        return Err(ModelError::Config(format!("need m >= n >= 1 and m1, m3 >= 1 (m={m}, n={n}, m1={m1}, m3={m3})")));
    }
    let a = 8 * m * n + k * m;
    let rfac = 8 * n * n + 8 * n;
    Ok(match alg {
        ModelAlgorithm::Cholesky => {
            let g1 = 8 * m1 * n * n + 8 * m1 * n;
            vec![
                StepCost { rm: a, wm: g1, rr: g1, wr: rfac, m_tasks: m1, r_tasks: r1, k_keys: n },
                StepCost { rm: rfac, wm: rfac, rr: rfac, wr: rfac, m_tasks: m_small, r_tasks: 1, k_keys: n },
                StepCost::map_only(a + m3 * rfac, a, m3),
            ]
        }
        ModelAlgorithm::IndirectTsqr => {
            let g1 = 8 * m1 * n * n + 8 * m1 * n;
            let gr = 8 * r1 * n * n + 8 * r1 * n;
            vec![
                StepCost { rm: a, wm: g1, rr: g1, wr: gr, m_tasks: m1, r_tasks: r1, k_keys: m1 * n },
                StepCost { rm: gr, wm: gr, rr: gr, wr: rfac, m_tasks: m_small, r_tasks: 1, k_keys: m1 * n },
                StepCost::map_only(a + m3 * rfac, a, m3),
            ]
        }
        ModelAlgorithm::DirectTsqr => {
            let s = 8 * m1 * n * n + k * m1;
            vec![
                StepCost::map_only(a, 8 * m * n + 8 * m1 * n * n + k * m + 64 * m1, m1),
                StepCost { rm: s, wm: s, rr: s, wr: 8 * m1 * n * n + 32 * m1 + rfac, m_tasks: m_small, r_tasks: 1, k_keys: m1 },
                StepCost::map_only(a + m3 * (8 * m1 * n * n + 64 * m1), a, m3),
            ]
        }
        ModelAlgorithm::HouseholderStep => vec![StepCost::map_only(a, a, m1), StepCost::map_only(a, 16 * m1, m1)],
    })
}

/// `sum_j (Rm br + Wm bw)/p_m + (Rr br + Wr bw)/p_r`, bytes in GB.
pub fn lower_bound(costs: &[StepCost], p: &ClusterParams) -> Result<f64, ModelError> {
    p.validate()?;
    let mut t = 0.0;
    for (j, c) in costs.iter().enumerate() {
        let map = c.rm as f64 * p.beta_r + c.wm as f64 * p.beta_w;
        if map > 0.0 {
            let pm = c.map_parallelism(p);
            if pm == 0 {
                return Err(ModelError::Consistency(format!("step {} moves map bytes with no map tasks", j + 1)));
            }
            t += map / GB / pm as f64;
        }
        let red = c.rr as f64 * p.beta_r + c.wr as f64 * p.beta_w;
        if red > 0.0 {
            let pr = c.reduce_parallelism(p);
            if pr == 0 {
                return Err(ModelError::Consistency(format!("step {} moves reduce bytes with zero reduce parallelism", j + 1)));
            }
            t += red / GB / pr as f64;
        }
    }
    Ok(t)
}

/// One streaming benchmark: `bytes` read in `read_seconds`, read and rewritten in
/// `readwrite_seconds`, by `tasks` concurrent tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamingMeasurement {
    pub bytes: f64,
    pub read_seconds: f64,
    pub readwrite_seconds: f64,
    pub tasks: u64,
}

/// Least-squares per-task inverse bandwidths `(beta_r, beta_w)` in s/GB.
pub fn fit_bandwidth(ms: &[StreamingMeasurement]) -> Result<(f64, f64), ModelError> {
    if ms.is_empty() {
        return Err(ModelError::Config("no streaming measurements".into()));
    }
    let (mut bb, mut br, mut bw) = (0.0, 0.0, 0.0);
    for m in ms {
        if m.bytes.is_nan() || m.bytes <= 0.0 || m.tasks == 0 {
            return Err(ModelError::Config("measurement moves no bytes or has no tasks".into()));
        }
        if !(m.readwrite_seconds > m.read_seconds && m.read_seconds > 0.0) {
            return Err(ModelError::Config(format!(
                "need 0 < read time < read+write time, got {} and {}",
                m.read_seconds, m.readwrite_seconds
            )));
        }
        let g = m.bytes / GB;
        bb += g * g;
        br += g * m.read_seconds * m.tasks as f64;
        bw += g * (m.readwrite_seconds - m.read_seconds) * m.tasks as f64;
    }
    Ok((br / bb, bw / bb))
}

/// Write synthetic records, then time a read-only pass and a read-and-copy pass
/// with `workers` concurrent tasks.
pub fn streaming_benchmark(bytes: u64, workers: usize, dir: &Path) -> Result<StreamingMeasurement, ModelError> {
    if bytes == 0 || workers == 0 {
        return Err(ModelError::Config("benchmark needs positive bytes and workers".into()));
    }
    const COLS: usize = 16;
    let record = 32 + 8 * COLS as u64;
    let per_task = (bytes / workers as u64).div_ceil(record).max(1);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let codec = Codec::Rows { cols: COLS };
    let src: Vec<_> = (0..workers).map(|w| dir.join(format!("stream-{w:03}.rec"))).collect();
    let dst: Vec<_> = (0..workers).map(|w| dir.join(format!("stream-{w:03}.copy.rec"))).collect();
    let row = crate::engine::encode_row(&[0.5; COLS]);

    let run = |f: &(dyn Fn(usize) -> Result<u64, EngineError> + Sync)| -> Result<u64, ModelError> {
        std::thread::scope(|s| {
            let hs: Vec<_> = (0..workers).map(|w| s.spawn(move || f(w))).collect();
            let mut total = 0;
            for h in hs {
                total += h.join().expect("benchmark worker panicked")?;
            }
            Ok(total)
        })
    };
    run(&|w| {
        let mut wr = RecordWriter::create(&src[w], codec)?;
        for i in 0..per_task {
            wr.write(crate::matrix::row_key(i).as_slice(), &row)?;
        }
        Ok(wr.finish()?.0.total())
    })?;
    let t0 = Instant::now();
    let moved = run(&|w| {
        let mut r = RecordFile::new(&src[w], codec).reader()?;
        for rec in r.by_ref() {
            rec?;
        }
        Ok(r.counts().total())
    })?;
    let read_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    run(&|w| {
        let mut r = RecordFile::new(&src[w], codec).reader()?;
        let mut wr = RecordWriter::create(&dst[w], codec)?;
        for rec in r.by_ref() {
            wr.write_record(&rec?)?;
        }
        wr.finish()?;
        Ok(r.counts().total())
    })?;
    let readwrite_seconds = t1.elapsed().as_secs_f64();
    for p in src.iter().chain(&dst) {
        fs::remove_file(p).map_err(io_err(p))?;
    }
    Ok(StreamingMeasurement {
        bytes: moved as f64,
        read_seconds: read_seconds.max(1e-9),
        readwrite_seconds: readwrite_seconds.max(read_seconds + 1e-9),
        tasks: workers as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Map,
    Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileLine {
    /// 1-based step number.
    pub step: usize,
    pub phase: Phase,
    pub direction: Direction,
    pub predicted: u64,
    /// Key plus value bytes; framing is not modelled.
    pub observed: u64,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconcileReport {
    pub lines: Vec<ReconcileLine>,
}

impl ReconcileReport {
    pub fn flagged(&self) -> impl Iterator<Item = &ReconcileLine> {
        self.lines.iter().filter(|l| l.flagged)
    }

    pub fn line(&self, step: usize, phase: Phase, direction: Direction) -> Option<&ReconcileLine> {
        self.lines.iter().find(|l| l.step == step && l.phase == phase && l.direction == direction)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("step\tphase\tdir\tpredicted\tobserved\tratio\tflag\n");
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{}\t{:?}\t{:?}\t{}\t{}\t{:.4}\t{}",
                l.step,
                l.phase,
                l.direction,
                l.predicted,
                l.observed,
                l.ratio,
                if l.flagged { "OUTSIDE" } else { "ok" }
            );
        }
        s
    }
}

pub const RECONCILE_BAND: (f64, f64) = (0.9, 1.1);

fn payload(b: &ByteCount) -> u64 {
    b.key + b.value
}

/// Per-step observed/predicted byte ratios; lines outside [`RECONCILE_BAND`] are flagged.
pub fn reconcile(predicted: &[StepCost], observed: &[TaskCounters]) -> Result<ReconcileReport, ModelError> {
    if predicted.len() != observed.len() {
        return Err(ModelError::StepMismatch { predicted: predicted.len(), observed: observed.len() });
    }
    let mut lines = Vec::new();
    for (j, (p, o)) in predicted.iter().zip(observed).enumerate() {
        let phases: [(Phase, &PhaseCounters, u64, u64); 2] =
            [(Phase::Map, &o.map, p.rm, p.wm), (Phase::Reduce, &o.reduce, p.rr, p.wr)];
        for (phase, c, pr, pw) in phases {
            for (direction, pred, obs) in [(Direction::Read, pr, payload(&c.bytes_read)), (Direction::Write, pw, payload(&c.bytes_written))] {
                let ratio = match (pred, obs) {
                    (0, 0) => 1.0,
                    (0, _) => f64::INFINITY,
                    _ => obs as f64 / pred as f64,
                };
                let flagged = !(RECONCILE_BAND.0..=RECONCILE_BAND.1).contains(&ratio);
                lines.push(ReconcileLine { step: j + 1, phase, direction, predicted: pred, observed: obs, ratio, flagged });
            }
        }
    }
    Ok(ReconcileReport { lines })
}

/// Model inputs for one matrix shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub m: u64,
    pub n: u64,
    /// Aggregate read inverse bandwidth (`beta_r / m_max`, s/GB); defaults to the global value.
    pub beta_r: Option<f64>,
    pub beta_w: Option<f64>,
    /// Map tasks of full passes for Cholesky and indirect TSQR.
    pub m1: Option<u64>,
    pub m1_direct: Option<u64>,
    pub m1_householder: Option<u64>,
}

/// Key-value model configuration with optional per-shape sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m_max: u64,
    pub r_max: u64,
    #[serde(default = "default_key_bytes")]
    pub key_bytes: u64,
    /// Aggregate inverse bandwidths (`beta / m_max`), s/GB.
    pub beta_r: f64,
    pub beta_w: f64,
    #[serde(default, rename = "shape")]
    pub shapes: Vec<ShapeConfig>,
}

fn default_key_bytes() -> u64 {
    32
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        c.params(None).validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn shape(&self, m: u64, n: u64) -> Option<&ShapeConfig> {
        self.shapes.iter().find(|s| s.m == m && s.n == n)
    }

    pub fn params(&self, shape: Option<&ShapeConfig>) -> ClusterParams {
        let br = shape.and_then(|s| s.beta_r).unwrap_or(self.beta_r);
        let bw = shape.and_then(|s| s.beta_w).unwrap_or(self.beta_w);
        ClusterParams::from_aggregate(self.m_max, self.r_max, br, bw, self.key_bytes)
    }
}

/// Lower bounds for every algorithm on one shape, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub m: u64,
    pub n: u64,
    pub cholesky: f64,
    pub indirect: f64,
    pub cholesky_ir: f64,
    pub indirect_ir: f64,
    pub direct: f64,
    pub householder: f64,
}

impl PredictionRow {
    pub fn values(&self) -> [f64; 6] {
        [self.cholesky, self.indirect, self.cholesky_ir, self.indirect_ir, self.direct, self.householder]
    }
}

pub const PREDICTION_COLUMNS: [&str; 6] = ["cholesky", "indirect-tsqr", "cholesky+ir", "indirect-tsqr+ir", "direct-tsqr", "householder"];

/// Evaluate all algorithms for `m x n`; shapes missing from the config use `m1 = m3 = m_max`.
pub fn predict(cfg: &ModelConfig, m: u64, n: u64) -> Result<PredictionRow, ModelError> {
    let shape = cfg.shape(m, n);
    let p = cfg.params(shape);
    let m1 = shape.and_then(|s| s.m1).unwrap_or(cfg.m_max);
    let m1d = shape.and_then(|s| s.m1_direct).unwrap_or(m1);
    let m1h = shape.and_then(|s| s.m1_householder).unwrap_or(m1);
    let k = cfg.key_bytes;
    let lb = |alg, m1| -> Result<f64, ModelError> { lower_bound(&byte_counts(alg, m, n, m1, m1, k, cfg.r_max, cfg.m_max)?, &p) };
    let cholesky = lb(ModelAlgorithm::Cholesky, m1)?;
    let indirect = lb(ModelAlgorithm::IndirectTsqr, m1)?;
    Ok(PredictionRow {
        m,
        n,
        cholesky,
        indirect,
        cholesky_ir: 2.0 * cholesky,
        indirect_ir: 2.0 * indirect,
        direct: lb(ModelAlgorithm::DirectTsqr, m1d)?,
        householder: n as f64 * lb(ModelAlgorithm::HouseholderStep, m1h)?,
    })
}

pub fn prediction_table(rows: &[PredictionRow]) -> String {
    let mut s = format!("rows\tcols\t{}\n", PREDICTION_COLUMNS.join("\t"));
    for r in rows {
        let _ = write!(s, "{}\t{}", r.m, r.n);
        for v in r.values() {
            let _ = write!(s, "\t{v:.0}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn icme() -> ClusterParams {
        ClusterParams::from_aggregate(40, 40, 1.6002, 3.1072, 32)
    }

    #[test]
    fn closed_forms() {
        let c = byte_counts(ModelAlgorithm::Cholesky, 100, 2, 4, 4, 32, 40, 40).unwrap();
        assert_eq!(c[0].rm, 4800);
        let i = byte_counts(ModelAlgorithm::IndirectTsqr, 100, 2, 4, 4, 32, 40, 40).unwrap();
        assert_eq!(i[0].wr, 1920);
        let d = byte_counts(ModelAlgorithm::DirectTsqr, 1000, 5, 7, 3, 32, 40, 40).unwrap();
        assert_eq!((d[0].rr, d[0].wr), (0, 0));
        assert_eq!(d[0].wm, 8 * 1000 * 5 + 8 * 7 * 25 + 32 * 1000 + 64 * 7);
        assert!(byte_counts(ModelAlgorithm::DirectTsqr, 1, 5, 7, 3, 32, 40, 40).is_err());
        assert!("nonsense".parse::<ModelAlgorithm>().is_err());
    }

    #[test]
    fn zero_costs_zero_time() {
        assert_eq!(lower_bound(&[StepCost::default()], &icme()).unwrap(), 0.0);
        let bad = StepCost { rr: 10, r_tasks: 1, k_keys: 0, ..Default::default() };
        assert!(matches!(lower_bound(&[bad], &icme()), Err(ModelError::Consistency(_))));
    }

    #[test]
    fn cholesky_2500000000x10() {
        let steps = byte_counts(ModelAlgorithm::Cholesky, 2_500_000_000, 10, 1680, 1680, 32, 40, 40).unwrap();
        let t = lower_bound(&steps, &icme()).unwrap();
        assert!((t / 1645.0 - 1.0).abs() <= 0.01, "{t}");
    }

    #[test]
    fn householder_150000000x100() {
        let p = ClusterParams::from_aggregate(40, 40, 1.3869, 3.2117, 32);
        let steps = byte_counts(ModelAlgorithm::HouseholderStep, 150_000_000, 100, 1200, 1200, 32, 40, 40).unwrap();
        let t = 100.0 * lower_bound(&steps, &p).unwrap();
        assert!((t / 69569.0 - 1.0).abs() <= 0.01, "{t}");
    }

    #[test]
    fn fit_table_row() {
        let m = StreamingMeasurement { bytes: 193.1 * GB, read_seconds: 309.0, readwrite_seconds: 909.0, tasks: 40 };
        let (br, bw) = fit_bandwidth(&[m]).unwrap();
        assert!((br / 40.0 - 1.6002).abs() < 5e-5, "{}", br / 40.0);
        assert!((bw / 40.0 - 3.1072).abs() < 5e-5, "{}", bw / 40.0);
        assert_eq!(fit_bandwidth(&[m, m]).unwrap(), (br, bw));
        assert!(fit_bandwidth(&[]).is_err());
        assert!(fit_bandwidth(&[StreamingMeasurement { bytes: 0.0, ..m }]).is_err());
        assert!(fit_bandwidth(&[StreamingMeasurement { readwrite_seconds: 100.0, ..m }]).is_err());
    }

    #[test]
    fn fit_recovers_synthetic_betas() {
        let (br, bw) = (57.3, 121.9);
        let ms: Vec<_> = [(10.0, 4), (73.5, 16), (2.25, 1)]
            .iter()
            .map(|&(g, t): &(f64, u64)| StreamingMeasurement {
                bytes: g * GB,
                read_seconds: g * br / t as f64,
                readwrite_seconds: g * (br + bw) / t as f64,
                tasks: t,
            })
            .collect();
        let (fr, fw) = fit_bandwidth(&ms).unwrap();
        assert!((fr / br - 1.0).abs() <= 1e-10);
        assert!((fw / bw - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn benchmark_measures_something() {
        let dir = tempfile::tempdir().unwrap();
        assert!(streaming_benchmark(0, 2, dir.path()).is_err());
        let m = streaming_benchmark(4 << 20, 2, dir.path()).unwrap();
        assert!(m.read_seconds < m.readwrite_seconds);
        assert!(m.bytes >= (4 << 20) as f64);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    fn counters(steps: &[StepCost]) -> Vec<TaskCounters> {
        let bc = |v| ByteCount { key: 0, value: v, framing: 3 };
        steps
            .iter()
            .map(|s| TaskCounters {
                map: PhaseCounters { bytes_read: bc(s.rm), bytes_written: bc(s.wm), ..Default::default() },
                reduce: PhaseCounters { bytes_read: bc(s.rr), bytes_written: bc(s.wr), ..Default::default() },
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn reconcile_exact_and_mismatch() {
        let steps = byte_counts(ModelAlgorithm::DirectTsqr, 10_000, 8, 4, 4, 32, 40, 40).unwrap();
        let obs = counters(&steps);
        let rep = reconcile(&steps, &obs).unwrap();
        assert_eq!(rep.lines.len(), 12);
        assert!(rep.lines.iter().all(|l| l.ratio == 1.0 && !l.flagged));
        let mut more = obs.clone();
        more.push(TaskCounters::default());
        assert!(matches!(reconcile(&steps, &more), Err(ModelError::StepMismatch { .. })));
        let mut off = obs;
        off[0].map.bytes_read.value *= 2;
        let rep = reconcile(&steps, &off).unwrap();
        assert_eq!(rep.flagged().count(), 1);
        assert!(rep.to_text().contains("OUTSIDE"));
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let text = "m_max = 40\nr_max = 40\nbeta_r = 1.6002\nbeta_w = 3.1072\n\n[[shape]]\nm = 2500000000\nn = 10\nm1 = 1680\n";
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(cfg.key_bytes, 32);
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let row = predict(&cfg, 2_500_000_000, 10).unwrap();
        assert!((row.cholesky / 1645.0 - 1.0).abs() <= 0.01);
        assert_eq!(row.cholesky_ir, 2.0 * row.cholesky);
        assert!(predict(&cfg, 1000, 4).is_ok());
        assert!(ModelConfig::parse("m_max = 0\nr_max = 1\nbeta_r = 1\nbeta_w = 1\n").is_err());
        assert!(prediction_table(&[row]).starts_with("rows\tcols\tcholesky"));
    }

    fn arb_step() -> impl Strategy<Value = StepCost> {
        (0u64..1 << 40, 0u64..1 << 40, 0u64..1 << 30, 0u64..1 << 30, 1u64..5000, 1u64..100, 1u64..1000).prop_map(
            |(rm, wm, rr, wr, m_tasks, r_tasks, k_keys)| StepCost { rm, wm, rr, wr, m_tasks, r_tasks, k_keys },
        )
    }

    proptest! {
        #[test]
        fn monotone_in_bytes_and_slots(steps in prop::collection::vec(arb_step(), 1..5), extra in 1u64..1 << 30, j in 0usize..5, which in 0usize..4) {
            let p = icme();
            let base = lower_bound(&steps, &p).unwrap();
            let mut more = steps.clone();
            let s = &mut more[j % steps.len()];
            match which { 0 => s.rm += extra, 1 => s.wm += extra, 2 => s.rr += extra, _ => s.wr += extra }
            prop_assert!(lower_bound(&more, &p).unwrap() >= base);
            let wider = ClusterParams { m_max: p.m_max * 2, r_max: p.r_max * 3, ..p.clone() };
            prop_assert!(lower_bound(&steps, &wider).unwrap() <= base * (1.0 + 1e-12));
        }
    }
}
