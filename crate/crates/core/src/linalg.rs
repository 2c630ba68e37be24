//! Small dense linear-algebra helpers used by both the tape engine and the
//! plain (non-differentiable) numerical code.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Jitter escalation schedule for covariance-like factorizations: a clean
/// attempt first, then `base`, then three ×10 escalations.
pub const DEFAULT_JITTER: f64 = 1e-6;
const JITTER_ESCALATIONS: usize = 3;

/// Lower-triangular Cholesky factor of a symmetric matrix, reading only the
/// lower triangle of `a`. Returns the failing pivot index on breakdown.
pub fn cholesky_lower(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Outcome of a jittered factorization: the factor and the jitter that was
/// actually added to the diagonal (0.0 when the clean attempt succeeded).
pub struct JitteredCholesky {
    pub factor: DMatrix<f64>,
    pub jitter_used: f64,
}

/// Cholesky with the crate's jitter escalation policy.
pub fn cholesky_jittered(a: &DMatrix<f64>, base_jitter: f64) -> Result<JitteredCholesky> {
    match cholesky_lower(a) {
        Ok(factor) => {
            return Ok(JitteredCholesky {
                factor,
                jitter_used: 0.0,
            })
        }
        Err(_) => {}
    }
    let mut jitter = base_jitter;
    let mut last_pivot = 0;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut aj = a.clone();
        for i in 0..a.nrows() {
            aj[(i, i)] += jitter;
        }
        match cholesky_lower(&aj) {
            Ok(factor) => {
                return Ok(JitteredCholesky {
                    factor,
                    jitter_used: jitter,
                })
            }
            Err(p) => last_pivot = p,
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        pivot: last_pivot,
        max_jitter: jitter / 10.0,
    })
}

/// Solve `L x = b` for lower-triangular `L` (reads the lower triangle only).
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// `A^{-1} b` through the Cholesky factor `L` of `A`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// `log det A` from the Cholesky factor of `A`.
pub fn logdet_from_chol(l: &DMatrix<f64>) -> f64 {
    (0..l.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum()
}

/// Force exact symmetry.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Log-density of `N(x | mean, cov)` evaluated through a jittered Cholesky.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::ShapeMismatch {
            op: "gaussian_logpdf",
            detail: format!("x {}, mean {}, cov {}x{}", d, mean.len(), cov.nrows(), cov.ncols()),
        });
    }
    let chol = cholesky_jittered(cov, DEFAULT_JITTER)?;
    let v = DMatrix::from_column_slice(d, 1, (x - mean).as_slice());
    let w = solve_lower(&chol.factor, &v);
    let quad: f64 = w.iter().map(|e| e * e).sum();
    let ld = logdet_from_chol(&chol.factor);
    Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + ld + quad))
}

/// Moore–Penrose pseudo-inverse via SVD (used for pseudo-state initialization).
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))
}

/// True when every entry is finite.
pub fn all_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}
