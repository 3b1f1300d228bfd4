//! Indirect TSQR (R by a reduction tree of local QRs) and the indirect `Q = A R^-1` step.

use crate::dense::{local_qr, tri_inverse, DenseMatrix, UpperTriangular};
use crate::engine::{encode_row, Emitter, Groups, StageInput, StageSpec, TaskContext, TaskError};
use crate::matrix::PartitionedMatrix;

use super::{
    check_shape, cholesky::cholesky_r, discard, index_key, indexed_rows, read_block, read_indexed_rows, write_small, DriverError, DriverOptions, QRResult, RunStats,
};

/// Factorization used to re-orthogonalize the computed Q in one refinement step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refine {
    Cholesky,
    IndirectTsqr,
}

/// Reduction-tree keys carry the tree level in the top byte so pass-through rows never collide.
fn tree_key(level: u64, index: u64) -> [u8; 8] {
    index_key((level << 56) | index)
}

/// Stack the delivered R rows, refactor and emit the new R.
fn refactor(ctx: &TaskContext, groups: &mut Groups, out: &mut Emitter, n: usize, level: u64, last: bool) -> Result<(), TaskError> {
    let mut keys = Vec::new();
    let mut data = Vec::new();
    while let Some(g) = groups.next_group()? {
        let key = g.key.clone();
        for v in g.values() {
            let v = v?;
            if v.len() != 8 * n {
                return Err(format!("R row has {} bytes, expected {}", v.len(), 8 * n).into());
            }
            keys.push(key.clone());
            data.extend(v.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        }
    }
    let rows = keys.len();
    if rows == 0 {
        return Ok(());
    }
    if rows < n {
        if last {
            return Err(format!("final reduce received {rows} rows, fewer than {n} columns").into());
        }
        // too short to factor: forward unchanged
        for (i, k) in keys.iter().enumerate() {
            out.emit(k, &encode_row(&data[i * n..(i + 1) * n]))?;
        }
        return Ok(());
    }
    let s = DenseMatrix::from_vec(rows, n, data)?;
    let r = local_qr(&s)?.r.into_dense();
    for i in 0..n {
        let key = if last { index_key(i as u64) } else { tree_key(level, (ctx.task.index * n + i) as u64) };
        out.emit(&key, &encode_row(r.row(i)))?;
    }
    Ok(())
}

fn identity_map(_: &TaskContext, input: &mut crate::engine::RecordStream<'_>, out: &mut Emitter) -> Result<(), TaskError> {
    for r in input {
        out.emit_record(&r?)?;
    }
    Ok(())
}

/// R of `A` from local QRs of row blocks and `tree_levels` intermediate reduce levels.
pub fn indirect_tsqr_r(engine: &crate::engine::Engine, a: &PartitionedMatrix, opts: &DriverOptions) -> Result<(UpperTriangular, RunStats), DriverError> {
    check_shape(a)?;
    if opts.reducers == 0 {
        return Err(DriverError::Config("reducers must be at least 1".into()));
    }
    let n = a.cols();
    let levels = opts.tree_levels as u64;
    let first_reducers = if levels == 0 { 1 } else { opts.reducers };

    let mut stages = Vec::new();
    stages.push(
        StageSpec::map_only("tsqr-local", move |ctx, input, out| {
            let (_, block) = read_block(input, n)?;
            if block.rows() == 0 {
                return Ok(());
            }
            let r = local_qr(&block)?.r.into_dense();
            for i in 0..n {
                out.emit(&tree_key(0, (ctx.task.index * n + i) as u64), &encode_row(r.row(i)))?;
            }
            Ok(())
        })
        .with_reduce(first_reducers, move |ctx, groups, out| refactor(ctx, groups, out, n, 1, levels == 0))
        .output("S1", crate::engine::Codec::Framed),
    );
    for level in 2..=levels + 1 {
        let last = level == levels + 1;
        let name = if last { "tsqr-final".to_string() } else { format!("tsqr-level-{level}") };
        let reducers = if last { 1 } else { opts.reducers };
        stages.push(
            StageSpec::map_only(name, identity_map)
                .input(format!("S{}", level - 1))
                .with_reduce(reducers, move |ctx, groups, out| refactor(ctx, groups, out, n, level, last))
                .output(format!("S{level}"), crate::engine::Codec::Framed),
        );
    }
    let out = engine.run_pipeline(&stages, &a.coalesced_splits(n as u64))?;
    let mut stats = RunStats::default();
    for (i, c) in out.counters.iter().cloned().enumerate() {
        stats.push(c, i == 0);
    }
    let ch = out.channel(&format!("S{}", levels + 1))?;
    let r = UpperTriangular::from_upper_part(read_indexed_rows(ch, n)?)?;
    discard(engine, ch)?;
    stats.rank_deficient = rank_flag(&r);
    Ok((r, stats))
}

pub(crate) fn rank_flag(r: &UpperTriangular) -> bool {
    let d = r.diagonal();
    let scale = r.as_dense().frobenius_norm();
    d.iter().any(|x| x.abs() <= crate::dense::RANK_TOL * scale)
}

/// Indirect TSQR: R from the reduction tree, then optionally `Q = A R^-1` with one refinement step.
pub fn indirect_tsqr(
    engine: &crate::engine::Engine,
    a: &PartitionedMatrix,
    want_q: bool,
    refine: bool,
    opts: &DriverOptions,
) -> Result<QRResult, DriverError> {
    let (r, stats) = indirect_tsqr_r(engine, a, opts)?;
    finish_indirect(engine, a, r, stats, want_q, refine.then_some(Refine::IndirectTsqr), opts)
}

pub(crate) fn finish_indirect(
    engine: &crate::engine::Engine,
    a: &PartitionedMatrix,
    r: UpperTriangular,
    mut stats: RunStats,
    want_q: bool,
    refine: Option<Refine>,
    opts: &DriverOptions,
) -> Result<QRResult, DriverError> {
    if !want_q && refine.is_none() {
        return Ok(QRResult { q: None, r, stats });
    }
    let mut res = ar_inverse(engine, a, &r, refine, opts)?;
    stats.extend(res.stats);
    res.stats = stats;
    if !want_q {
        if let Some(q) = res.q.take() {
            discard(engine, &q.channel())?;
        }
    }
    Ok(res)
}

/// `Q = A R^-1` in one map-only pass with `R^-1` broadcast; with `refine`, Q is
/// factored again and the step repeated once, giving `R = R2 R`.
pub fn ar_inverse(
    engine: &crate::engine::Engine,
    a: &PartitionedMatrix,
    r: &UpperTriangular,
    refine: Option<Refine>,
    opts: &DriverOptions,
) -> Result<QRResult, DriverError> {
    let n = a.cols();
    if r.order() != n {
        return Err(DriverError::Config(format!("R is {0}x{0} but A has {n} columns", r.order())));
    }
    let mut stats = RunStats::default();
    let q = apply_inverse(engine, a, r, &mut stats)?;
    let Some(method) = refine else {
        return Ok(QRResult { q: Some(q), r: r.clone(), stats });
    };
    let (r2, s2) = match method {
        Refine::Cholesky => cholesky_r(engine, &q, opts)?,
        Refine::IndirectTsqr => indirect_tsqr_r(engine, &q, opts)?,
    };
    stats.extend(s2);
    let q2 = apply_inverse(engine, &q, &r2, &mut stats)?;
    discard(engine, &q.channel())?;
    let (r_final, _) = r2.mul(r)?.sign_normalized();
    Ok(QRResult { q: Some(q2), r: r_final, stats })
}

fn apply_inverse(
    engine: &crate::engine::Engine,
    a: &PartitionedMatrix,
    r: &UpperTriangular,
    stats: &mut RunStats,
) -> Result<PartitionedMatrix, DriverError> {
    let n = a.cols();
    let rinv = tri_inverse(r)?;
    let bcast = write_small(engine, "rinv", &indexed_rows(rinv.as_dense()))?;
    let codec = a.codec();
    let spec = StageSpec::map_only("ar-inverse", move |ctx, input, out| {
        let rinv = read_broadcast_square(ctx.broadcast("rinv")?, n)?;
        let mut q = vec![0.0; n];
        for rec in input {
            let rec = rec?;
            let row = rec.row()?;
            if row.len() != n {
                return Err(format!("row has {} values, expected {n}", row.len()).into());
            }
            q.iter_mut().for_each(|x| *x = 0.0);
            for (i, &ai) in row.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (qj, &rij) in q[i..].iter_mut().zip(&rinv.row(i)[i..]) {
                    *qj += ai * rij;
                }
            }
            out.emit(&rec.key, &encode_row(&q))?;
        }
        Ok(())
    })
    .output("Q", codec)
    .broadcast("rinv");
    let input = StageInput { splits: a.splits(), ..Default::default() }.with_broadcast("rinv", bcast.clone());
    let out = engine.run_stage(&spec, &input)?;
    discard(engine, &bcast)?;
    stats.push(out.counters.clone(), true);
    Ok(PartitionedMatrix::from_channel(out.channel("Q")?, n)?)
}

pub(crate) fn read_broadcast_square(recs: &[crate::engine::Record], n: usize) -> Result<DenseMatrix, TaskError> {
    let mut m = DenseMatrix::zeros(n, n);
    if recs.len() != n {
        return Err(format!("broadcast factor has {} rows, expected {n}", recs.len()).into());
    }
    for r in recs {
        let i = super::parse_index_key(&r.key)? as usize;
        let row = r.row()?;
        if i >= n || row.len() != n {
            return Err(format!("bad broadcast factor row {i}").into());
        }
        m.row_mut(i).copy_from_slice(&row);
    }
    Ok(m)
}
