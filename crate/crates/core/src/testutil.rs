//! Independent oracles shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dense::DenseMatrix;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

/// Modified Gram-Schmidt thin QR with a positive diagonal.
pub fn mgs_qr(a: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let (m, n) = a.shape();
    let mut q = a.clone();
    let mut r = DenseMatrix::zeros(n, n);
    for k in 0..n {
        let nrm = (0..m).map(|i| q[(i, k)] * q[(i, k)]).sum::<f64>().sqrt();
        r[(k, k)] = nrm;
        for i in 0..m {
            q[(i, k)] /= nrm;
        }
        for j in k + 1..n {
            let d: f64 = (0..m).map(|i| q[(i, k)] * q[(i, j)]).sum();
            r[(k, j)] = d;
            for i in 0..m {
                q[(i, j)] -= d * q[(i, k)];
            }
        }
    }
    (q, r)
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn jacobi_eigenvalues(s: &DenseMatrix) -> Vec<f64> {
    let n = s.rows();
    let mut a = s.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 * a.frobenius_norm().powi(2) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}
