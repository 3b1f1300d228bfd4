use super::{DenseError, DenseMatrix};

const SYMMETRY_TOL: f64 = 1e-12;

/// Lower-triangular `L` with `L L^T = S` and a positive diagonal.
///
/// A non-positive pivot is reported with its index; this is where Cholesky QR
/// breaks down once the Gram matrix loses definiteness in floating point.
pub fn cholesky(s: &DenseMatrix) -> Result<DenseMatrix, DenseError> {
    let n = s.rows();
    if s.cols() != n {
        return Err(DenseError::Shape(format!("cholesky of a {}x{} matrix", n, s.cols())));
    }
    s.check_finite()?;
    let scale = s.max_abs();
    for i in 0..n {
        for j in 0..i {
            let diff = (s[(i, j)] - s[(j, i)]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(DenseError::NotSymmetric { row: i, col: j, diff });
            }
        }
    }

    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let d = s[(j, j)] - lj[..j].iter().map(|v| v * v).sum::<f64>();
        if d.is_nan() || d <= 0.0 {
            return Err(DenseError::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let dot: f64 = l.row(i)[..j].iter().zip(&l.row(j)[..j]).map(|(a, b)| a * b).sum();
            l[(i, j)] = (s[(i, j)] - dot) / ljj;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::norm2;
    use crate::testutil::gaussian;

    #[test]
    fn hand_checkable_two_by_two() {
        let s = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 5.0]]).unwrap();
        let l = cholesky(&s).unwrap();
        assert_eq!(l, DenseMatrix::from_rows(&[[2.0, 0.0], [1.0, 2.0]]).unwrap());
    }

    #[test]
    fn identity() {
        assert_eq!(cholesky(&DenseMatrix::identity(4)).unwrap(), DenseMatrix::identity(4));
    }

    #[test]
    fn reproduces_random_gram_matrix() {
        let a = gaussian(100, 6, 5);
        let s = a.gram();
        let l = cholesky(&s).unwrap();
        let llt = l.matmul(&l.transpose()).unwrap();
        let err = norm2(&llt.sub(&s).unwrap()).unwrap() / norm2(&s).unwrap();
        assert!(err <= 1e-13, "{err:e}");
        assert!((0..6).all(|i| l[(i, i)] > 0.0));
    }

    #[test]
    fn indefinite_names_the_pivot() {
        let s = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        match cholesky(&s) {
            Err(DenseError::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let s = DenseMatrix::from_rows(&[[1.0, 0.5], [0.4, 1.0]]).unwrap();
        assert!(matches!(cholesky(&s), Err(DenseError::NotSymmetric { .. })));
    }
}
