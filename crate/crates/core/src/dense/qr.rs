use super::{DenseError, DenseMatrix, UpperTriangular};

/// Diagonal entries of `R` below `RANK_TOL * ||A||_F` flag the factorization as rank deficient.
pub const RANK_TOL: f64 = 1e-12;

/// Thin QR factors with `R` sign-normalized to a nonnegative diagonal.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: DenseMatrix,
    pub r: UpperTriangular,
    /// Set when some `|R[k][k]|` fell below the rank tolerance. The factors are still valid.
    pub rank_deficient: bool,
}

/// Householder thin QR of a `p x q` block with `p >= q`.
///
/// Reflectors are formed column by column and `Q` is accumulated by applying
/// them in reverse to the leading `q` columns of the identity. Rows of `R` with
/// a negative diagonal are flipped together with the matching column of `Q`.
pub fn local_qr(a: &DenseMatrix) -> Result<QrFactors, DenseError> {
    let (p, q) = a.shape();
    if p < q {
        return Err(DenseError::Shape(format!("local_qr needs rows >= cols, got {p}x{q}")));
    }
    a.check_finite()?;

    let mut w = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(q);
    let mut scratch = vec![0.0; q];

    for k in 0..q {
        let x: Vec<f64> = (k..p).map(|i| w[(i, k)]).collect();
        if x[1..].iter().all(|&v| v == 0.0) {
            // already upper triangular in this column
            reflectors.push(None);
            continue;
        }
        let norm = scaled_norm(&x);
        let x0 = x[0];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        // v^T v = 2 (||x||^2 - alpha x0) = 2 ||x|| (||x|| + |x0|)
        let vtv = 2.0 * norm * (norm + x0.abs());
        apply_reflector(&mut w, &v, vtv, k, k, &mut scratch);
        // exact values below and on the diagonal of column k
        w[(k, k)] = alpha;
        for i in k + 1..p {
            w[(i, k)] = 0.0;
        }
        reflectors.push(Some(scale_for_apply(v, vtv)));
    }

    let mut r = DenseMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            r[(i, j)] = w[(i, j)];
        }
    }

    let mut qm = DenseMatrix::eye(p, q);
    for k in (0..q).rev() {
        if let Some(v) = &reflectors[k] {
            // stored v is pre-scaled so that H = I - v v^T
            apply_reflector(&mut qm, v, 2.0, k, k, &mut scratch);
        }
    }

    for i in 0..q {
        if r[(i, i)] < 0.0 {
            for j in i..q {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..p {
                qm[(row, i)] = -qm[(row, i)];
            }
        }
    }

    let tol = RANK_TOL * a.frobenius_norm();
    let rank_deficient = (0..q).any(|i| r[(i, i)].abs() <= tol);
    Ok(QrFactors { q: qm, r: UpperTriangular::from_dense_unchecked(r), rank_deficient })
}

/// Rescale `v` so the reflector reads `I - v v^T` (with `vtv` replaced by 2).
fn scale_for_apply(mut v: Vec<f64>, vtv: f64) -> Vec<f64> {
    let s = (2.0 / vtv).sqrt();
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// `W[row0.., col0..] -= (2 / vtv) v (v^T W[row0.., col0..])`.
fn apply_reflector(
    w: &mut DenseMatrix,
    v: &[f64],
    vtv: f64,
    row0: usize,
    col0: usize,
    scratch: &mut [f64],
) {
    let cols = w.cols();
    let s = &mut scratch[..cols - col0];
    s.iter_mut().for_each(|x| *x = 0.0);
    for (off, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (sj, &wij) in s.iter_mut().zip(&w.row(row0 + off)[col0..]) {
            *sj += vi * wij;
        }
    }
    let beta = 2.0 / vtv;
    s.iter_mut().for_each(|x| *x *= beta);
    for (off, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (wij, &sj) in w.row_mut(row0 + off)[col0..].iter_mut().zip(s.iter()) {
            *wij -= vi * sj;
        }
    }
}

pub(crate) fn scaled_norm(x: &[f64]) -> f64 {
    let amax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        return 0.0;
    }
    let s: f64 = x.iter().map(|v| (v / amax) * (v / amax)).sum();
    amax * s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::norm2;
    use crate::testutil::{gaussian, mgs_qr};

    #[test]
    fn identity_is_its_own_factorization() {
        let f = local_qr(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(f.q, DenseMatrix::identity(3));
        assert_eq!(f.r.as_dense(), &DenseMatrix::identity(3));
        assert!(!f.rank_deficient);
    }

    #[test]
    fn single_column_three_four_five() {
        let a = DenseMatrix::from_rows(&[[3.0], [4.0]]).unwrap();
        let f = local_qr(&a).unwrap();
        assert!((f.r.get(0, 0) - 5.0).abs() < 1e-15);
        assert!((f.q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((f.q[(1, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn random_50x5_residual_orthogonality_and_mgs_agreement() {
        let a = gaussian(50, 5, 7);
        let f = local_qr(&a).unwrap();
        let qr = f.q.matmul(f.r.as_dense()).unwrap();
        let res = norm2(&a.sub(&qr).unwrap()).unwrap() / norm2(&a).unwrap();
        assert!(res <= 1e-14, "residual {res:e}");
        let ortho = norm2(&f.q.gram().sub(&DenseMatrix::identity(5)).unwrap()).unwrap();
        assert!(ortho <= 1e-14, "orthogonality {ortho:e}");

        // MGS on a well-conditioned matrix produces the same positive-diagonal factors
        let (q_mgs, r_mgs) = mgs_qr(&a);
        for i in 0..5 {
            for j in 0..5 {
                assert!((r_mgs[(i, j)] - f.r.get(i, j)).abs() < 1e-12);
            }
        }
        assert!(q_mgs.sub(&f.q).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn wide_block_is_rejected() {
        assert!(matches!(local_qr(&gaussian(2, 3, 1)), Err(DenseError::Shape(_))));
    }

    #[test]
    fn dependent_columns_are_flagged() {
        let mut a = gaussian(10, 3, 3);
        for i in 0..10 {
            a[(i, 2)] = 2.0 * a[(i, 0)];
        }
        let f = local_qr(&a).unwrap();
        assert!(f.rank_deficient);
    }

    #[test]
    fn zero_column_yields_zero_diagonal() {
        let mut a = gaussian(6, 2, 4);
        for i in 0..6 {
            a[(i, 0)] = 0.0;
        }
        let f = local_qr(&a).unwrap();
        assert_eq!(f.r.get(0, 0), 0.0);
        assert!(f.rank_deficient);
    }
}
