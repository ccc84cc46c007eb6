//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let s = symmetrize(m);
    s.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Checks that `m` is square and PSD up to `tol`, scaled by the matrix magnitude.
pub fn ensure_psd(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what} has non-finite entries")));
    }
    let min_eig = min_eigenvalue(m);
    if min_eig < -tol * m.amax().max(1.0) {
        return Err(Error::NotPsd {
            what: what.to_string(),
            min_eig,
        });
    }
    Ok(())
}

/// Lower-triangular factor `L` with `L Lᵀ = m` for a symmetric PSD `m`.
///
/// Zero (or slightly negative) pivots zero out their column instead of failing,
/// so semidefinite inputs are factored exactly. For positive definite input this
/// is the ordinary Cholesky factor.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let s = symmetrize(m);
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let pivot_tol = 1e-14 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= pivot_tol {
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / root;
        }
    }
    l
}

/// `log det m` for a symmetric positive definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
///
/// When the Cholesky factorization fails, retries with `ridge * max(1, |m|)` added
/// to the diagonal and returns `true` in the second slot.
pub fn solve_spd_ridged(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    ridge: f64,
) -> Result<(DMatrix<f64>, bool)> {
    let s = symmetrize(m);
    if let Some(chol) = s.clone().cholesky() {
        return Ok((chol.solve(rhs), false));
    }
    let bump = ridge * s.amax().max(1.0);
    let n = s.nrows();
    let regularized = s + DMatrix::<f64>::identity(n, n) * bump;
    let chol = regularized
        .cholesky()
        .ok_or_else(|| Error::Singular("conditioning block after ridge".to_string()))?;
    Ok((chol.solve(rhs), true))
}

/// Builds a column vector from a slice.
pub fn col(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Quadratic form `x M xᵀ` for a row vector `x` (1 × k) and square `M`.
pub fn row_quad(x: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    (x * m * x.transpose())[(0, 0)]
}
