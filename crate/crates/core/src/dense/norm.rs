use super::{DenseError, DenseMatrix};

#[derive(Debug, Clone, Copy)]
pub struct Norm2Options {
    /// Stop once the eigenvalue estimate changes by less than this, relatively.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for Norm2Options {
    fn default() -> Self {
        Norm2Options { tol: 1e-12, max_iter: 200_000 }
    }
}

/// Spectral norm by power iteration on the smaller Gram matrix.
pub fn norm2(a: &DenseMatrix) -> Result<f64, DenseError> {
    norm2_with(a, Norm2Options::default())
}

pub fn norm2_with(a: &DenseMatrix, opts: Norm2Options) -> Result<f64, DenseError> {
    let scale = a.max_abs();
    if scale == 0.0 || a.rows() == 0 || a.cols() == 0 {
        return Ok(0.0);
    }
    if !scale.is_finite() {
        return Err(DenseError::NonFinite(0, 0));
    }
    let mut scaled = a.clone();
    scaled.scale(1.0 / scale);
    let g = if scaled.rows() >= scaled.cols() { scaled.gram() } else { scaled.transpose().gram() };
    let n = g.rows();

    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * (i as f64 + 1.0) / n as f64).collect();
    normalize(&mut x);
    let mut lambda = 0.0;
    for _ in 0..opts.max_iter {
        let y = g.left_mul_row(&x);
        let next: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
        let ny = normalize_into(&y, &mut x);
        if ny == 0.0 {
            return Ok(0.0);
        }
        if (next - lambda).abs() <= opts.tol * next.abs() {
            return Ok(scale * next.max(0.0).sqrt());
        }
        lambda = next;
    }
    Err(DenseError::NoConvergence { what: "power iteration", iterations: opts.max_iter })
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= n);
}

fn normalize_into(y: &[f64], x: &mut [f64]) -> f64 {
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for (xi, yi) in x.iter_mut().zip(y) {
            *xi = yi / n;
        }
    }
    n
}
