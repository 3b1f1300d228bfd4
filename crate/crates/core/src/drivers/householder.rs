//! Householder QR with two passes per column: one to reduce the column norm and
//! projections, one to apply the reflector and rewrite the matrix.

use std::sync::Arc;

use crate::dense::{DenseMatrix, UpperTriangular};
use crate::engine::{encode_row, Codec, Engine, RecordStream, StageInput, StageSpec, TaskContext, TaskError};
use crate::matrix::PartitionedMatrix;

use super::tsqr::rank_flag;
use super::{check_shape, discard, DriverError, DriverOptions, QRResult, RunStats};

fn row_offsets(m: &PartitionedMatrix) -> Arc<Vec<u64>> {
    let mut acc = 0;
    Arc::new(
        m.partitions()
            .iter()
            .map(|p| {
                let o = acc;
                acc += p.rows;
                o
            })
            .collect(),
    )
}

/// Visit rows of one task with their global index.
fn for_rows(
    ctx: &TaskContext,
    offsets: &[u64],
    width: usize,
    input: &mut RecordStream<'_>,
    mut f: impl FnMut(u64, Vec<u8>, Vec<f64>) -> Result<(), TaskError>,
) -> Result<(), TaskError> {
    let off = offsets[ctx.task.index];
    for (local, rec) in input.enumerate() {
        let rec = rec?;
        let row = rec.row()?;
        if row.len() != width {
            return Err(format!("row has {} values, expected {width}", row.len()).into());
        }
        f(off + local as u64, rec.key, row)?;
    }
    Ok(())
}

/// Run a map-only pass over `w` whose tasks emit small vectors keyed `y` and `p`; returns their sums.
fn reduce_pass(
    engine: &Engine,
    w: &PartitionedMatrix,
    spec: StageSpec,
    len: usize,
    stats: &mut RunStats,
) -> Result<(Vec<f64>, Option<Vec<f64>>), DriverError> {
    let out = engine.run_stage(&spec, &StageInput { splits: w.splits(), ..Default::default() })?;
    stats.push(out.counters.clone(), true);
    let ch = out.channel("out")?;
    let mut y = vec![0.0; len];
    let mut pivot = None;
    for rec in ch.read_all()? {
        let v = rec.row()?;
        match rec.key.as_slice() {
            b"y" => y.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
            b"p" => pivot = Some(v),
            _ => return Err(DriverError::Integrity("unexpected record in column pass".into())),
        }
    }
    discard(engine, ch)?;
    Ok((y, pivot))
}

fn rewrite_pass(engine: &Engine, w: &PartitionedMatrix, spec: StageSpec, cols: usize, stats: &mut RunStats) -> Result<PartitionedMatrix, DriverError> {
    let out = engine.run_stage(&spec, &StageInput { splits: w.splits(), ..Default::default() })?;
    stats.push(out.counters.clone(), true);
    Ok(PartitionedMatrix::from_channel(out.channel("out")?, cols)?)
}

/// One column's reflector: `H = I - beta v v^T`, `v = x - alpha e_k`.
struct Reflector {
    alpha: f64,
    v0: f64,
    beta: f64,
    /// `v^T W_j` for every column j (only `j > k` is used).
    s: Vec<f64>,
}

/// Householder QR; `opts.householder_q` adds `2n` passes that apply the reflectors to `[I; 0]`.
pub fn householder_qr(engine: &Engine, a: &PartitionedMatrix, opts: &DriverOptions) -> Result<QRResult, DriverError> {
    check_shape(a)?;
    let n = a.cols();
    let want_q = opts.householder_q;
    let mut stats = RunStats::default();
    let mut r = DenseMatrix::zeros(n, n);
    let mut taus = Vec::with_capacity(n);
    let mut w = a.clone();
    let offsets = row_offsets(a);

    for k in 0..n {
        let off = offsets.clone();
        let norm_pass = StageSpec::map_only(format!("householder-norm-{k}"), move |ctx, input, out| {
            let mut y = vec![0.0; n];
            let mut any = false;
            for_rows(ctx, &off, n, input, |i, _, row| {
                if i < k as u64 {
                    return Ok(());
                }
                let x = row[k];
                for j in k..n {
                    y[j] += x * row[j];
                }
                if i == k as u64 {
                    out.emit(b"p", &encode_row(&row))?;
                }
                any = true;
                Ok(())
            })?;
            if any {
                out.emit(b"y", &encode_row(&y))?;
            }
            Ok(())
        });
        let (y, pivot) = reduce_pass(engine, &w, norm_pass, n, &mut stats)?;
        let pivot = pivot.ok_or_else(|| DriverError::Integrity(format!("pivot row {k} not found")))?;
        let norm = y[k].sqrt();
        if norm == 0.0 {
            return Err(DriverError::RankDeficient { column: k });
        }
        let x0 = pivot[k];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let h = Reflector {
            alpha,
            v0: x0 - alpha,
            beta: 1.0 / (norm * (norm + x0.abs())),
            s: (0..n).map(|j| y[j] - alpha * pivot[j]).collect(),
        };
        r[(k, k)] = alpha;
        for j in k + 1..n {
            r[(k, j)] = pivot[j] - h.beta * h.v0 * h.s[j];
        }
        taus.push(h.beta * h.v0 * h.v0);

        let combine = want_q && k + 1 == n;
        let width = if combine { 2 * n } else { n };
        let off = offsets.clone();
        let update = StageSpec::map_only(format!("householder-update-{k}"), move |ctx, input, out| {
            for_rows(ctx, &off, n, input, |i, key, mut row| {
                if i >= k as u64 {
                    let vi = if i == k as u64 { h.v0 } else { row[k] };
                    for (x, s) in row[k + 1..n].iter_mut().zip(&h.s[k + 1..n]) {
                        *x -= h.beta * vi * s;
                    }
                    row[k] = if i == k as u64 { h.alpha } else { vi / h.v0 };
                }
                if combine {
                    row.extend((0..n).map(|j| if i == j as u64 { 1.0 } else { 0.0 }));
                }
                out.emit(&key, &encode_row(&row))?;
                Ok(())
            })
        })
        .output("out", Codec::Rows { cols: width });
        let next = rewrite_pass(engine, &w, update, width, &mut stats)?;
        if k > 0 {
            discard(engine, &w.channel())?;
        }
        w = next;
    }

    let (r, signs) = UpperTriangular::from_upper_part(r)?.sign_normalized();
    stats.rank_deficient = rank_flag(&r);
    if !want_q {
        discard(engine, &w.channel())?;
        return Ok(QRResult { q: None, r, stats });
    }

    let signs = Arc::new(signs);
    for k in (0..n).rev() {
        let off = offsets.clone();
        let project = StageSpec::map_only(format!("householder-q-project-{k}"), move |ctx, input, out| {
            let mut y = vec![0.0; n];
            let mut any = false;
            for_rows(ctx, &off, 2 * n, input, |i, _, row| {
                if i < k as u64 {
                    return Ok(());
                }
                let vi = if i == k as u64 { 1.0 } else { row[k] };
                for j in 0..n {
                    y[j] += vi * row[n + j];
                }
                any = true;
                Ok(())
            })?;
            if any {
                out.emit(b"y", &encode_row(&y))?;
            }
            Ok(())
        });
        let (y, _) = reduce_pass(engine, &w, project, n, &mut stats)?;
        let tau = taus[k];
        let last = k == 0;
        let (width, codec) = if last { (n, a.codec()) } else { (2 * n, Codec::Rows { cols: 2 * n }) };
        let off = offsets.clone();
        let signs = signs.clone();
        let apply = StageSpec::map_only(format!("householder-q-apply-{k}"), move |ctx, input, out| {
            for_rows(ctx, &off, 2 * n, input, |i, key, mut row| {
                if i >= k as u64 {
                    let vi = if i == k as u64 { 1.0 } else { row[k] };
                    for j in 0..n {
                        row[n + j] -= tau * vi * y[j];
                    }
                }
                if last {
                    let q: Vec<f64> = (0..n).map(|j| row[n + j] * signs[j]).collect();
                    out.emit(&key, &encode_row(&q))?;
                } else {
                    out.emit(&key, &encode_row(&row))?;
                }
                Ok(())
            })
        })
        .output("out", codec);
        let next = rewrite_pass(engine, &w, apply, width, &mut stats)?;
        discard(engine, &w.channel())?;
        w = next;
    }
    Ok(QRResult { q: Some(w), r, stats })
}
