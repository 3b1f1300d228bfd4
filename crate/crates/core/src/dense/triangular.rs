use super::{DenseError, DenseMatrix};

/// Square upper-triangular matrix stored in full. Entries below the diagonal are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperTriangular(DenseMatrix);

impl UpperTriangular {
    /// Takes the upper triangle of a square matrix; anything below the diagonal must already be zero.
    pub fn from_dense(m: DenseMatrix) -> Result<Self, DenseError> {
        if m.rows() != m.cols() {
            return Err(DenseError::Shape(format!(
                "upper triangular factor must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        for i in 0..m.rows() {
            for j in 0..i {
                if m[(i, j)] != 0.0 {
                    return Err(DenseError::Shape(format!(
                        "entry ({i}, {j}) below the diagonal is {:e}",
                        m[(i, j)]
                    )));
                }
            }
        }
        Ok(UpperTriangular(m))
    }

    /// Zeroes everything below the diagonal.
    pub fn from_upper_part(mut m: DenseMatrix) -> Result<Self, DenseError> {
        if m.rows() != m.cols() {
            return Err(DenseError::Shape(format!("{}x{} is not square", m.rows(), m.cols())));
        }
        for i in 0..m.rows() {
            for j in 0..i {
                m[(i, j)] = 0.0;
            }
        }
        Ok(UpperTriangular(m))
    }

    pub(crate) fn from_dense_unchecked(m: DenseMatrix) -> Self {
        UpperTriangular(m)
    }

    pub fn identity(n: usize) -> Self {
        UpperTriangular(DenseMatrix::identity(n))
    }

    pub fn order(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_dense(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_dense(self) -> DenseMatrix {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.order()).map(|i| self.0[(i, i)]).collect()
    }

    /// Flip rows with a negative diagonal. Returns the normalized factor and the applied signs.
    pub fn sign_normalized(&self) -> (UpperTriangular, Vec<f64>) {
        let n = self.order();
        let mut m = self.0.clone();
        let mut signs = vec![1.0; n];
        for i in 0..n {
            if m[(i, i)] < 0.0 {
                signs[i] = -1.0;
                m.row_mut(i).iter_mut().for_each(|v| *v = -*v);
            }
        }
        (UpperTriangular(m), signs)
    }

    /// Product of two upper-triangular factors, still upper triangular.
    pub fn mul(&self, other: &UpperTriangular) -> Result<UpperTriangular, DenseError> {
        Ok(UpperTriangular(self.0.matmul(&other.0)?))
    }

    /// Largest relative entrywise difference after sign normalization of both factors.
    pub fn relative_distance(&self, other: &UpperTriangular) -> f64 {
        let (a, _) = self.sign_normalized();
        let (b, _) = other.sign_normalized();
        let scale = a.0.max_abs().max(b.0.max_abs());
        if scale == 0.0 {
            return 0.0;
        }
        a.0.sub(&b.0).map(|d| d.max_abs() / scale).unwrap_or(f64::INFINITY)
    }
}

/// Inverse of an upper-triangular matrix.
///
/// Rows of the inverse are solved one at a time from `x_i R = e_i`, which keeps
/// the left residual `R^{-1} R - I` small. Callers forming `A R^{-1}` rely on
/// that side.
pub fn tri_inverse(r: &UpperTriangular) -> Result<UpperTriangular, DenseError> {
    let n = r.order();
    if let Some(i) = (0..n).find(|&i| r.get(i, i) == 0.0) {
        return Err(DenseError::Singular(i));
    }
    let mut x = DenseMatrix::zeros(n, n);
    for i in 0..n {
        x[(i, i)] = 1.0 / r.get(i, i);
        for j in i + 1..n {
            let mut s = 0.0;
            for k in i..j {
                s += x[(i, k)] * r.get(k, j);
            }
            x[(i, j)] = -s / r.get(j, j);
        }
    }
    Ok(UpperTriangular(x))
}
