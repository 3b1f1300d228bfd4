use super::{DenseError, DenseMatrix};

pub const SVD_MAX_SWEEPS: usize = 60;

/// `A = U diag(sigma) Vt` with `sigma` sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD of a `p x q` block with `p >= q`.
///
/// Column pairs are rotated until every pair is orthogonal to working
/// precision. Column norms are then the singular values and the rotations
/// accumulate `V`.
pub fn small_svd(a: &DenseMatrix) -> Result<Svd, DenseError> {
    let (p, q) = a.shape();
    if p < q {
        return Err(DenseError::Shape(format!("small_svd needs rows >= cols, got {p}x{q}")));
    }
    a.check_finite()?;

    // columns of A and of V stored as rows for contiguous access
    let mut w = a.transpose();
    let mut v = DenseMatrix::identity(q);
    let tol = f64::EPSILON;

    let mut converged = q < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let (alpha, beta, gamma) = {
                    let (wi, wj) = (w.row(i), w.row(j));
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in wi.iter().zip(wj) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(DenseError::NoConvergence { what: "one-sided Jacobi SVD", iterations: SVD_MAX_SWEEPS });
    }

    let norms: Vec<f64> = (0..q).map(|i| super::qr::scaled_norm(w.row(i))).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let mut u = DenseMatrix::zeros(p, q);
    let mut vt = DenseMatrix::zeros(q, q);
    let mut sigma = Vec::with_capacity(q);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        vt.row_mut(dst).copy_from_slice(v.row(src));
        if s > 0.0 {
            for (r, &x) in w.row(src).iter().enumerate() {
                u[(r, dst)] = x / s;
            }
        } else {
            missing.push(dst);
        }
    }
    complete_orthonormal_columns(&mut u, &missing);
    Ok(Svd { u, sigma, vt })
}

fn rotate_rows(m: &mut DenseMatrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols();
    for k in 0..cols {
        let x = m[(i, k)];
        let y = m[(j, k)];
        m[(i, k)] = c * x - s * y;
        m[(j, k)] = s * x + c * y;
    }
}

/// Fill zero columns listed in `missing` with unit vectors orthogonal to every other column.
fn complete_orthonormal_columns(u: &mut DenseMatrix, missing: &[usize]) {
    let (p, q) = u.shape();
    let mut candidate = 0;
    for &col in missing {
        while candidate < p {
            let mut x = vec![0.0; p];
            x[candidate] = 1.0;
            candidate += 1;
            // two rounds of Gram-Schmidt against the filled columns
            for _ in 0..2 {
                for other in 0..q {
                    if other == col || missing.contains(&other) && other > col {
                        continue;
                    }
                    let dot: f64 = (0..p).map(|r| u[(r, other)] * x[r]).sum();
                    for (r, xr) in x.iter_mut().enumerate() {
                        *xr -= dot * u[(r, other)];
                    }
                }
            }
            let nrm = super::qr::scaled_norm(&x);
            if nrm > 0.5 {
                for (r, xr) in x.iter().enumerate() {
                    u[(r, col)] = xr / nrm;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{local_qr, norm2};
    use crate::testutil::{gaussian, jacobi_eigenvalues};

    fn reconstruct(s: &Svd) -> DenseMatrix {
        let mut us = s.u.clone();
        for i in 0..us.rows() {
            for j in 0..us.cols() {
                us[(i, j)] *= s.sigma[j];
            }
        }
        us.matmul(&s.vt).unwrap()
    }

    #[test]
    fn diagonal_input() {
        let s = small_svd(&DenseMatrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 1.0]);
        for i in 0..2 {
            assert_eq!(s.u[(i, i)].abs(), 1.0);
            assert_eq!(s.vt[(i, i)].abs(), 1.0);
        }
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = small_svd(&DenseMatrix::identity(5)).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn ascending_diagonal_gets_sorted() {
        let s = small_svd(&DenseMatrix::from_diag(&[1.0, 2.0, 5.0])).unwrap();
        assert_eq!(s.sigma, vec![5.0, 2.0, 1.0]);
        assert!(reconstruct(&s).sub(&DenseMatrix::from_diag(&[1.0, 2.0, 5.0])).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn random_8x8_matches_jacobi_eigen_oracle() {
        let r = gaussian(8, 8, 99);
        let s = small_svd(&r).unwrap();
        let mut eig = jacobi_eigenvalues(&r.gram());
        eig.sort_by(|a, b| b.total_cmp(a));
        for (sv, ev) in s.sigma.iter().zip(&eig) {
            let want = ev.max(0.0).sqrt();
            assert!((sv - want).abs() <= 1e-10 * want, "{sv} vs {want}");
        }
        let err = norm2(&reconstruct(&s).sub(&r).unwrap()).unwrap() / s.sigma[0];
        assert!(err < 1e-14, "{err:e}");
        let eye = DenseMatrix::identity(8);
        assert!(norm2(&s.u.gram().sub(&eye).unwrap()).unwrap() < 1e-14);
        assert!(norm2(&s.vt.gram().sub(&eye).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn rank_deficient_input_still_has_orthogonal_u() {
        let mut a = gaussian(4, 4, 8);
        for i in 0..4 {
            a[(i, 3)] = 0.0;
            a[(i, 2)] = 0.0;
        }
        let s = small_svd(&a).unwrap();
        assert_eq!(s.sigma[3], 0.0);
        let ortho = norm2(&s.u.gram().sub(&DenseMatrix::identity(4)).unwrap()).unwrap();
        assert!(ortho < 1e-14, "{ortho:e}");
    }

    #[test]
    fn singular_values_invariant_under_left_orthogonal_factor() {
        let r = gaussian(6, 6, 12);
        let qo = local_qr(&gaussian(6, 6, 13)).unwrap().q;
        let a = small_svd(&r).unwrap().sigma;
        let b = small_svd(&qo.matmul(&r).unwrap()).unwrap().sigma;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x);
        }
    }
}
