//! Dense kernels on row-major `n x n` f64 slices.

/// In-place lower Cholesky factorization. On success the lower triangle of
/// `a` holds `L` with `L L^T = A` and the strict upper triangle is zeroed.
/// Returns `false` when `A` is not positive definite.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    true
}

pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_in_place(&mut l, n).then_some(l)
}

/// Solves `L y = b` in place for lower-triangular `L`.
pub fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// `sqrt(v^T A^{-1} v)` given the Cholesky factor of `A`. `scratch` must hold `n` values.
pub fn chol_norm(l: &[f64], n: usize, v: &[f64], scratch: &mut [f64]) -> f64 {
    scratch[..n].copy_from_slice(&v[..n]);
    forward_solve(l, n, &mut scratch[..n]);
    scratch[..n].iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `log det A` from the Cholesky factor of `A`.
pub fn log_det_from_chol(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}
