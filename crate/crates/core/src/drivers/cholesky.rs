//! Cholesky QR: R from the Cholesky factor of the reduced Gram matrix.

use crate::dense::{cholesky, small_svd, DenseError, DenseMatrix, UpperTriangular};
use crate::engine::{decode_row, encode_row, Codec, Engine, StageSpec};
use crate::matrix::PartitionedMatrix;

use super::tsqr::{finish_indirect, rank_flag, Refine};
use super::{check_shape, discard, index_key, parse_index_key, read_indexed_rows, DriverError, DriverOptions, QRResult, RunStats};

/// R of `A` as the transposed Cholesky factor of `A^T A`, summed by `opts.reducers` reduce tasks.
pub(crate) fn cholesky_r(engine: &Engine, a: &PartitionedMatrix, opts: &DriverOptions) -> Result<(UpperTriangular, RunStats), DriverError> {
    check_shape(a)?;
    if opts.reducers == 0 {
        return Err(DriverError::Config("reducers must be at least 1".into()));
    }
    let n = a.cols();
    let ata = StageSpec::map_only("ata", move |_, input, out| {
        let mut g = vec![0.0; n * n];
        let mut any = false;
        for r in input {
            let row = decode_row(&r?.value)?;
            if row.len() != n {
                return Err(format!("row has {} values, expected {n}", row.len()).into());
            }
            for i in 0..n {
                let ai = row[i];
                for j in i..n {
                    g[i * n + j] += ai * row[j];
                }
            }
            any = true;
        }
        if !any {
            return Ok(());
        }
        for i in 0..n {
            for j in 0..i {
                g[i * n + j] = g[j * n + i];
            }
            out.emit(&index_key(i as u64), &encode_row(&g[i * n..(i + 1) * n]))?;
        }
        Ok(())
    })
    .with_reduce(opts.reducers, move |_, groups, out| {
        while let Some(grp) = groups.next_group()? {
            let key = grp.key.clone();
            let mut acc = vec![0.0; n];
            for v in grp.values() {
                for (a, x) in acc.iter_mut().zip(decode_row(&v?)?) {
                    *a += x;
                }
            }
            out.emit(&key, &encode_row(&acc))?;
        }
        Ok(())
    })
    .output("ata", Codec::Rows { cols: n });

    let chol = StageSpec::map_only("cholesky", |_, input, out| {
        for r in input {
            out.emit_record(&r?)?;
        }
        Ok(())
    })
    .input("ata")
    .with_reduce(1, move |_, groups, out| {
        let mut s = DenseMatrix::zeros(n, n);
        let mut seen = 0;
        while let Some(grp) = groups.next_group()? {
            let i = parse_index_key(&grp.key)? as usize;
            let vals = grp.collect_values()?;
            if i >= n || vals.len() != 1 {
                return Err(format!("Gram row {i} arrived {} times", vals.len()).into());
            }
            s.row_mut(i).copy_from_slice(&decode_row(&vals[0])?);
            seen += 1;
        }
        if seen != n {
            return Err(format!("only {seen} of {n} Gram rows arrived").into());
        }
        let l = match cholesky(&s) {
            Ok(l) => l,
            Err(DenseError::NotPositiveDefinite { pivot, .. }) => {
                return Err(Box::new(DriverError::CholeskyFailed { pivot, kappa_estimate: gram_kappa(&s) }));
            }
            Err(e) => return Err(e.into()),
        };
        let r = l.transpose();
        for i in 0..n {
            out.emit(&index_key(i as u64), &encode_row(r.row(i)))?;
        }
        Ok(())
    })
    .output("R", Codec::Rows { cols: n });

    let out = engine.run_pipeline(&[ata, chol], &a.splits())?;
    let mut stats = RunStats::default();
    for (i, c) in out.counters.iter().cloned().enumerate() {
        stats.push(c, i == 0);
    }
    let ch = out.channel("R")?;
    let r = UpperTriangular::from_upper_part(read_indexed_rows(ch, n)?)?;
    discard(engine, ch)?;
    stats.rank_deficient = rank_flag(&r);
    Ok((r, stats))
}

/// `sqrt(kappa(S))` estimated from the singular values of the Gram matrix.
fn gram_kappa(s: &DenseMatrix) -> f64 {
    match small_svd(s) {
        Ok(svd) => {
            let hi = svd.sigma[0];
            let lo = *svd.sigma.last().unwrap();
            if lo <= 0.0 {
                f64::INFINITY
            } else {
                (hi / lo).sqrt()
            }
        }
        Err(_) => f64::NAN,
    }
}

/// Cholesky QR; `Q = A R^-1` when `want_q`, with one Cholesky QR refinement of Q when `refine`.
pub fn cholesky_qr(
    engine: &Engine,
    a: &PartitionedMatrix,
    want_q: bool,
    refine: bool,
    opts: &DriverOptions,
) -> Result<QRResult, DriverError> {
    let (r, stats) = cholesky_r(engine, a, opts)?;
    finish_indirect(engine, a, r, stats, want_q, refine.then_some(Refine::Cholesky), opts)
}
