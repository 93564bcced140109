//! Small dense linear-algebra kernels on plain `f64` slices.
//!
//! The per-study covariance blocks are tiny (at most a few dozen rows), so the
//! posterior hot loop uses these allocation-free routines on caller-owned
//! buffers instead of going through a matrix library on every evaluation.
//! Matrices are row-major.

/// In-place lower-triangular Cholesky factorization of a symmetric matrix.
///
/// Only the lower triangle of `a` is read; on success the lower triangle holds
/// the factor L with A = L Lᵀ. Fails on a non-positive or non-finite pivot.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), usize> {
    debug_assert!(a.len() >= n * n);
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(j);
        }
        let dsqrt = diag.sqrt();
        a[j * n + j] = dsqrt;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / dsqrt;
        }
    }
    Ok(())
}

/// log det(A) from a Cholesky factor L of A.
pub fn cholesky_log_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|j| l[j * n + j].ln()).sum::<f64>() * 2.0
}

/// Solve A x = b in place given the Cholesky factor L of A.
pub fn cholesky_solve_vec(l: &[f64], n: usize, b: &mut [f64]) {
    // forward: L z = b
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    // backward: Lᵀ x = z
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solve A X = B in place for a row-major `n × ncols` right-hand side.
pub fn cholesky_solve_mat(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            for c in 0..ncols {
                b[i * ncols + c] -= lik * b[k * ncols + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] /= d;
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[k * n + i];
            for c in 0..ncols {
                b[i * ncols + c] -= lki * b[k * ncols + c];
            }
        }
        let d = l[i * n + i];
        for c in 0..ncols {
            b[i * ncols + c] /= d;
        }
    }
}

/// Invert a lower-triangular matrix into `out` (row-major, upper part zeroed).
pub fn lower_triangular_inverse(l: &[f64], n: usize, out: &mut [f64]) {
    for v in out[..n * n].iter_mut() {
        *v = 0.0;
    }
    for j in 0..n {
        out[j * n + j] = 1.0 / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * out[k * n + j];
            }
            out[i * n + j] = s / l[i * n + i];
        }
    }
}
