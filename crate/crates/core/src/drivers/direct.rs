//! Direct TSQR in three stages, its SVD form, and the recursive variant for large stacked R.

use std::collections::HashMap;

use crate::dense::{local_qr, small_svd, DenseMatrix, UpperTriangular};
use crate::engine::{
    decode_row, encode_row, Block, ChannelOutput, ChannelSpec, Codec, Engine, InputSplit, Phase, Record, StageInput,
    StageSpec, TaskError,
};
use crate::matrix::PartitionedMatrix;

use super::tsqr::rank_flag;
use super::{check_shape, discard, index_key, read_block, read_indexed_rows, DriverError, DriverOptions, QRResult, RunStats, SVDResult};

/// Which SVD outputs the direct method produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMode {
    /// `U = Q U_R`, sigma and `V^T`, in the same three stages as the QR.
    Full,
    /// Only steps 1 and 2: sigma and `V^T`, no U.
    ValuesOnly,
}

pub(crate) const TASK_KEY_BYTES: usize = 32;

/// Deterministic fixed-width task identifier, e.g. `s1:000...0007`.
pub(crate) fn task_key(tag: &str, index: usize) -> Vec<u8> {
    let width = TASK_KEY_BYTES - tag.len() - 1;
    format!("{tag}:{index:0width$}").into_bytes()
}

/// Key of row `i` of a task's R factor when R1 is emitted row by row.
fn task_row_key(task: &[u8], i: usize) -> Vec<u8> {
    let mut k = task.to_vec();
    k.extend_from_slice(&(i as u32).to_be_bytes());
    k
}

struct DirectOut {
    q: Option<ChannelOutput>,
    r: UpperTriangular,
    sigma: Option<Vec<f64>>,
    vt: Option<DenseMatrix>,
    stats: RunStats,
}

fn step1(n: usize, rows_form: bool) -> StageSpec {
    StageSpec::map_only("direct-step1", move |ctx, input, out| {
        let (keys, block) = read_block(input, n)?;
        if block.rows() == 0 {
            return Ok(());
        }
        let f = local_qr(&block)?;
        let tk = task_key("s1", ctx.task.index);
        out.emit_to("Q1", &tk, &Block::with_keys(keys, f.q).encode())?;
        let r = f.r.into_dense();
        if rows_form {
            for i in 0..n {
                out.emit(&task_row_key(&tk, i), &encode_row(r.row(i)))?;
            }
        } else {
            out.emit(&tk, &Block::new(r).encode())?;
        }
        Ok(())
    })
    .output("R1", Codec::Framed)
    .side_channel(ChannelSpec::new("Q1", Codec::Framed))
}

fn step2(n: usize, gather_bytes: usize, svd: Option<SvdMode>) -> StageSpec {
    let mut spec = StageSpec::map_only("direct-step2", |_, input, out| {
        for r in input {
            out.emit_record(&r?)?;
        }
        Ok(())
    })
    .input("R1")
    .with_reduce(1, move |_, groups, out| {
        let mut ids = Vec::new();
        let mut blocks = Vec::new();
        while let Some(g) = groups.next_group()? {
            let key = g.key.clone();
            let vals = g.collect_values()?;
            if vals.len() != 1 {
                return Err(Box::new(DriverError::Integrity(format!(
                    "task id {} delivered {} R factors",
                    String::from_utf8_lossy(&key),
                    vals.len()
                ))));
            }
            let b = Block::decode(&vals[0])?;
            if b.matrix.shape() != (n, n) {
                return Err(format!("R factor is {:?}, expected {n}x{n}", b.matrix.shape()).into());
            }
            let needed = 8 * n * n * (blocks.len() + 1);
            if needed > gather_bytes {
                return Err(Box::new(DriverError::GatherBudget { needed, budget: gather_bytes }));
            }
            ids.push(key);
            blocks.push(b.matrix);
        }
        if blocks.is_empty() {
            return Err("no R factors reached the gather step".into());
        }
        let s = DenseMatrix::vstack(&blocks)?;
        let f = local_qr(&s)?;
        let r = f.r.into_dense();
        for i in 0..n {
            out.emit(&index_key(i as u64), &encode_row(r.row(i)))?;
        }
        let mut q2 = f.q;
        if let Some(mode) = svd {
            let d = small_svd(&r)?;
            out.emit_to("Sigma", b"sigma", &encode_row(&d.sigma))?;
            for i in 0..n {
                out.emit_to("Vt", &index_key(i as u64), &encode_row(d.vt.row(i)))?;
            }
            if mode == SvdMode::ValuesOnly {
                return Ok(());
            }
            q2 = q2.matmul(&d.u)?;
        }
        for (k, id) in ids.iter().enumerate() {
            out.emit_to("Q2", id, &Block::new(q2.row_block(k * n, (k + 1) * n)).encode())?;
        }
        Ok(())
    })
    .output("R", Codec::Rows { cols: n })
    .side_channel(ChannelSpec::new("Q2", Codec::Framed).written_by(Phase::Reduce));
    if svd.is_some() {
        spec = spec
            .side_channel(ChannelSpec::new("Sigma", Codec::Framed).written_by(Phase::Reduce))
            .side_channel(ChannelSpec::new("Vt", Codec::Rows { cols: n }).written_by(Phase::Reduce));
    }
    spec
}

/// Q2 blocks by task id, from either whole-block records or row records keyed `task id + u32 row`.
pub(crate) fn load_q2(recs: &[Record], n: usize) -> Result<HashMap<Vec<u8>, DenseMatrix>, TaskError> {
    let mut blocks = HashMap::new();
    let mut rows: HashMap<Vec<u8>, Vec<(u32, Vec<f64>)>> = HashMap::new();
    for r in recs {
        if r.key.len() == TASK_KEY_BYTES {
            let b = Block::decode(&r.value)?;
            if b.matrix.shape() != (n, n) {
                return Err(format!("Q2 block is {:?}, expected {n}x{n}", b.matrix.shape()).into());
            }
            if blocks.insert(r.key.clone(), b.matrix).is_some() {
                return Err(Box::new(DriverError::Integrity("duplicate Q2 block".into())));
            }
        } else if r.key.len() == TASK_KEY_BYTES + 4 {
            let (id, idx) = r.key.split_at(TASK_KEY_BYTES);
            let i = u32::from_be_bytes(idx.try_into().unwrap());
            rows.entry(id.to_vec()).or_default().push((i, decode_row(&r.value)?));
        } else {
            return Err(Box::new(DriverError::Integrity(format!("unexpected Q2 key of {} bytes", r.key.len()))));
        }
    }
    for (id, mut rs) in rows {
        rs.sort_by_key(|(i, _)| *i);
        if rs.len() != n || rs.iter().enumerate().any(|(k, (i, row))| *i as usize != k || row.len() != n) {
            return Err(Box::new(DriverError::Integrity(format!(
                "Q2 rows for task {} are incomplete",
                String::from_utf8_lossy(&id)
            ))));
        }
        let m = DenseMatrix::from_vec(n, n, rs.into_iter().flat_map(|(_, r)| r).collect())?;
        if blocks.insert(id, m).is_some() {
            return Err(Box::new(DriverError::Integrity("duplicate Q2 block".into())));
        }
    }
    Ok(blocks)
}

fn step3(n: usize, codec: Codec) -> StageSpec {
    StageSpec::map_only("direct-step3", move |ctx, input, out| {
        let q2 = load_q2(ctx.broadcast("Q2")?, n)?;
        for rec in input {
            let rec = rec?;
            let b = Block::decode(&rec.value)?;
            let keys = b.keys.ok_or("Q1 block carries no row keys")?;
            let m = q2.get(&rec.key).ok_or_else(|| {
                Box::new(DriverError::Integrity(format!("no Q2 block for task id {}", String::from_utf8_lossy(&rec.key))))
            })?;
            let q = b.matrix.matmul(m)?;
            for (i, k) in keys.iter().enumerate() {
                out.emit(k, &encode_row(q.row(i)))?;
            }
        }
        Ok(())
    })
    .input("Q1")
    .broadcast("Q2")
    .output("Q", codec)
}

fn direct_impl(
    engine: &Engine,
    splits: Vec<InputSplit>,
    codec: Codec,
    n: usize,
    opts: &DriverOptions,
    threshold: Option<u64>,
    svd: Option<SvdMode>,
) -> Result<DirectOut, DriverError> {
    let m1 = splits.len();
    if m1 == 0 {
        return Err(DriverError::Config("matrix has no rows".into()));
    }
    let stacked_rows = (m1 * n) as u64;
    if let Some(t) = threshold.filter(|&t| stacked_rows > t) {
        if svd.is_some() {
            return Err(DriverError::Config("the SVD form does not recurse".into()));
        }
        return recurse(engine, splits, codec, n, opts, t);
    }
    let needed = 8 * n * n * m1;
    if needed > opts.gather_bytes {
        return Err(DriverError::GatherBudget { needed, budget: opts.gather_bytes });
    }

    let mut stages = vec![step1(n, false), step2(n, opts.gather_bytes, svd)];
    let mut retain = vec!["R"];
    if svd.is_some() {
        retain.extend(["Sigma", "Vt"]);
    }
    if svd != Some(SvdMode::ValuesOnly) {
        stages.push(step3(n, codec));
        retain.push("Q");
    }
    let out = engine.run_pipeline_retaining(&stages, &splits, &retain)?;
    let mut stats = RunStats::default();
    for (i, c) in out.counters.iter().cloned().enumerate() {
        stats.push(c, i != 1);
    }
    let r_ch = out.channel("R")?;
    let r = UpperTriangular::from_upper_part(read_indexed_rows(r_ch, n)?)?;
    discard(engine, r_ch)?;
    stats.rank_deficient = rank_flag(&r);
    let (sigma, vt) = match svd {
        None => (None, None),
        Some(_) => {
            let s_ch = out.channel("Sigma")?;
            let sigma = s_ch.read_all()?.first().map(|r| r.row()).transpose()?.ok_or_else(|| DriverError::Integrity("sigma missing".into()))?;
            let v_ch = out.channel("Vt")?;
            let vt = read_indexed_rows(v_ch, n)?;
            discard(engine, s_ch)?;
            discard(engine, v_ch)?;
            (Some(sigma), Some(vt))
        }
    };
    Ok(DirectOut { q: out.channels.get("Q").cloned(), r, sigma, vt, stats })
}

/// Step 1 emits R1 row by row; the stacked R1 is itself factored by the direct method
/// and its Q replaces the step-2 output.
fn recurse(
    engine: &Engine,
    splits: Vec<InputSplit>,
    codec: Codec,
    n: usize,
    opts: &DriverOptions,
    threshold: u64,
) -> Result<DirectOut, DriverError> {
    let s1 = engine.run_stage(&step1(n, true), &StageInput { splits, ..Default::default() })?;
    let mut stats = RunStats::default();
    stats.push(s1.counters.clone(), true);
    let r1 = PartitionedMatrix::from_channel(s1.channel("R1")?, n)?;
    let per_split = (threshold / n as u64).max(2) * n as u64;
    let inner = direct_impl(engine, r1.coalesced_splits(per_split), Codec::Framed, n, opts, Some(threshold), None)?;
    discard(engine, &r1.channel())?;
    let q2 = inner.q.ok_or_else(|| DriverError::Integrity("recursive step produced no Q".into()))?;
    for mut s in inner.stats.stages {
        s.full_pass = false;
        stats.stages.push(s);
    }

    let q1 = s1.channel("Q1")?;
    let input = StageInput::from_channel(q1).with_broadcast("Q2", q2.clone());
    let s3 = engine.run_stage(&step3(n, codec), &input)?;
    stats.push(s3.counters.clone(), true);
    discard(engine, q1)?;
    discard(engine, &q2)?;
    stats.rank_deficient = inner.stats.rank_deficient;
    Ok(DirectOut { q: Some(s3.channel("Q")?.clone()), r: inner.r, sigma: None, vt: None, stats })
}

/// Direct TSQR: local QRs, one gathered QR of the stacked R factors, then `Q = Q1 Q2` per block.
pub fn direct_tsqr(engine: &Engine, a: &PartitionedMatrix, opts: &DriverOptions) -> Result<QRResult, DriverError> {
    check_shape(a)?;
    let n = a.cols();
    let out = direct_impl(engine, a.coalesced_splits(n as u64), a.codec(), n, opts, None, None)?;
    let q = out.q.map(|ch| PartitionedMatrix::from_channel(&ch, n)).transpose()?;
    Ok(QRResult { q, r: out.r, stats: out.stats })
}

/// SVD through the direct method: `A = (Q U) diag(sigma) V^T`.
pub fn direct_svd(engine: &Engine, a: &PartitionedMatrix, mode: SvdMode, opts: &DriverOptions) -> Result<SVDResult, DriverError> {
    check_shape(a)?;
    let n = a.cols();
    let out = direct_impl(engine, a.coalesced_splits(n as u64), a.codec(), n, opts, None, Some(mode))?;
    let u = out.q.map(|ch| PartitionedMatrix::from_channel(&ch, n)).transpose()?;
    Ok(SVDResult {
        u,
        sigma: out.sigma.expect("svd outputs"),
        vt: out.vt.expect("svd outputs"),
        r: out.r,
        stats: out.stats,
    })
}

/// Direct TSQR that recurses whenever the stacked R factors exceed `threshold_rows` rows.
pub fn recursive_direct_tsqr(
    engine: &Engine,
    a: &PartitionedMatrix,
    threshold_rows: u64,
    opts: &DriverOptions,
) -> Result<QRResult, DriverError> {
    check_shape(a)?;
    let n = a.cols();
    if threshold_rows < n as u64 {
        return Err(DriverError::Config(format!("recursion threshold {threshold_rows} is below the column count {n}")));
    }
    let out = direct_impl(engine, a.coalesced_splits(n as u64), a.codec(), n, opts, Some(threshold_rows), None)?;
    let q = out.q.map(|ch| PartitionedMatrix::from_channel(&ch, n)).transpose()?;
    Ok(QRResult { q, r: out.r, stats: out.stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::testkit::{fixture, oracle_r, ortho_err, residual};
    use crate::stability::{gen_conditioned, ConditionedMatrixSpec};
    use crate::testutil::gaussian;

    #[test]
    fn task_keys_are_fixed_width() {
        assert_eq!(task_key("s1", 7).len(), TASK_KEY_BYTES);
        assert_eq!(task_key("s1", 7), b"s1:00000000000000000000000000007".to_vec());
        assert!(task_key("s1", 2) < task_key("s1", 10));
    }

    #[test]
    fn single_partition_matches_local_qr() {
        let f = fixture(2);
        let a = gaussian(30, 4, 1);
        let m = f.matrix("a", &a, 100);
        let res = direct_tsqr(&f.engine, &m, &DriverOptions::default()).unwrap();
        let want = local_qr(&a).unwrap();
        assert_eq!(res.r, want.r);
        assert_eq!(res.q.unwrap().to_dense().unwrap(), want.q);
    }

    #[test]
    fn eight_by_two_in_four_partitions() {
        let f = fixture(4);
        let a = gaussian(8, 2, 2);
        let m = f.matrix("a", &a, 2);
        let res = direct_tsqr(&f.engine, &m, &DriverOptions::default()).unwrap();
        let q = res.q.as_ref().unwrap();
        assert_eq!(q.keys().unwrap(), m.keys().unwrap());
        let qd = q.to_dense().unwrap();
        let rel = crate::dense::norm2(&a.sub(&qd.matmul(res.r.as_dense()).unwrap()).unwrap()).unwrap()
            / crate::dense::norm2(&a).unwrap();
        assert!(rel <= 1e-14, "{rel:e}");
        assert!(ortho_err(&qd) <= 1e-14);
        assert!(res.r.relative_distance(&oracle_r(&a)) <= 1e-13);
        assert_eq!(res.stats.stages.len(), 3);
        assert_eq!(res.stats.passes_over_a(), 2);
    }

    #[test]
    fn stable_at_1e16() {
        let f = fixture(4);
        let spec = ConditionedMatrixSpec::new(2000, 10, 1e16, 5);
        let m = gen_conditioned(&spec, &f.data.join("k16"), 250).unwrap();
        let a = m.to_dense().unwrap();
        let res = direct_tsqr(&f.engine, &m, &DriverOptions::default()).unwrap();
        let q = res.q.unwrap().to_dense().unwrap();
        assert!(ortho_err(&q) <= 1e-13);
        assert!(residual(&a, &q, &res.r) <= 1e-12);
    }

    #[test]
    fn gather_budget_is_enforced() {
        let f = fixture(2);
        let m = f.matrix("a", &gaussian(40, 4, 3), 5);
        let opts = DriverOptions { gather_bytes: 8 * 4 * 4 * 3, ..Default::default() };
        let err = direct_tsqr(&f.engine, &m, &opts).unwrap_err();
        assert!(matches!(err, DriverError::GatherBudget { .. }), "{err}");
        assert!(err.to_string().contains("recursive"));
    }

    #[test]
    fn recursion_not_triggered_is_identical() {
        let f = fixture(3);
        let a = gaussian(64, 3, 4);
        let m = f.matrix("a", &a, 4);
        let plain = direct_tsqr(&f.engine, &m, &DriverOptions::default()).unwrap();
        let rec = recursive_direct_tsqr(&f.engine, &m, 1000, &DriverOptions::default()).unwrap();
        assert_eq!(plain.r, rec.r);
        assert_eq!(plain.q.unwrap().to_dense().unwrap(), rec.q.unwrap().to_dense().unwrap());
    }

    #[test]
    fn one_recursion_level() {
        let f = fixture(4);
        let a = gaussian(64, 3, 5);
        let m = f.matrix("a", &a, 4);
        let plain = direct_tsqr(&f.engine, &m, &DriverOptions::default()).unwrap();
        let rec = recursive_direct_tsqr(&f.engine, &m, 24, &DriverOptions::default()).unwrap();
        // outer step 1, inner steps 1-3, outer step 3
        assert_eq!(rec.stats.stages.len(), 5);
        assert_eq!(rec.stats.passes_over_a(), 2);
        assert!(rec.r.relative_distance(&plain.r) <= 1e-13);
        let q = rec.q.unwrap();
        assert_eq!(q.keys().unwrap(), m.keys().unwrap());
        let q = q.to_dense().unwrap();
        assert!(ortho_err(&q) <= 1e-13);
        assert!(residual(&a, &q, &rec.r) <= 1e-13);
    }

    #[test]
    fn deep_recursion() {
        let f = fixture(4);
        let a = gaussian(400, 2, 6);
        let m = f.matrix("a", &a, 2);
        let rec = recursive_direct_tsqr(&f.engine, &m, 8, &DriverOptions::default()).unwrap();
        assert!(rec.stats.stages.len() > 5);
        assert!(rec.r.relative_distance(&oracle_r(&a)) <= 1e-12);
        assert!(ortho_err(&rec.q.unwrap().to_dense().unwrap()) <= 1e-13);
    }

    #[test]
    fn threshold_below_n_is_rejected() {
        let f = fixture(1);
        let m = f.matrix("a", &gaussian(10, 3, 7), 5);
        assert!(matches!(recursive_direct_tsqr(&f.engine, &m, 2, &DriverOptions::default()), Err(DriverError::Config(_))));
    }

    #[test]
    fn svd_matches_construction() {
        let f = fixture(4);
        let spec = ConditionedMatrixSpec::new(1000, 6, 1e3, 8);
        let m = gen_conditioned(&spec, &f.data.join("svd"), 100).unwrap();
        let want = spec.singular_values();
        let res = direct_svd(&f.engine, &m, SvdMode::Full, &DriverOptions::default()).unwrap();
        for (s, w) in res.sigma.iter().zip(&want) {
            assert!((s - w).abs() <= 1e-10 * w, "{s} vs {w}");
        }
        assert_eq!(res.stats.stages.len(), 3);
        let u = res.u.unwrap().to_dense().unwrap();
        assert!(ortho_err(&u) <= 1e-13);
        let a = m.to_dense().unwrap();
        let rebuilt = u.matmul(&DenseMatrix::from_diag(&res.sigma)).unwrap().matmul(&res.vt).unwrap();
        assert!(a.sub(&rebuilt).unwrap().max_abs() <= 1e-12 * a.max_abs());
    }

    #[test]
    fn values_only_runs_two_stages() {
        let f = fixture(2);
        let a = gaussian(50, 3, 9);
        let m = f.matrix("a", &a, 10);
        let res = direct_svd(&f.engine, &m, SvdMode::ValuesOnly, &DriverOptions::default()).unwrap();
        assert_eq!(res.stats.stages.len(), 2);
        assert!(res.u.is_none());
        let want = small_svd(&oracle_r(&a).into_dense()).unwrap().sigma;
        for (s, w) in res.sigma.iter().zip(&want) {
            assert!((s - w).abs() <= 1e-12 * want[0]);
        }
    }

    #[test]
    fn single_column_sigma_is_the_norm() {
        let f = fixture(1);
        let a = gaussian(20, 1, 10);
        let m = f.matrix("a", &a, 5);
        let res = direct_svd(&f.engine, &m, SvdMode::Full, &DriverOptions::default()).unwrap();
        assert!((res.sigma[0] - a.frobenius_norm()).abs() <= 1e-14 * a.frobenius_norm());
    }

    #[test]
    fn q2_loader_checks_integrity() {
        let n = 2;
        let blk = Record::new(task_key("s1", 0), Block::new(DenseMatrix::identity(n)).encode());
        assert_eq!(load_q2(std::slice::from_ref(&blk), n).unwrap().len(), 1);
        assert!(load_q2(&[blk.clone(), blk.clone()], n).is_err());
        let rows: Vec<Record> = (0..n).map(|i| Record::new(task_row_key(&task_key("s1", 1), i), encode_row(&[i as f64, 1.0]))).collect();
        let got = load_q2(&rows, n).unwrap();
        assert_eq!(got[&task_key("s1", 1)][(1, 0)], 1.0);
        assert!(load_q2(&rows[..1], n).is_err());
        assert!(load_q2(&[Record::new("short", "x")], n).is_err());
    }
}
