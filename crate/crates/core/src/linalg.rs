use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` for symmetric positive definite `a`, falling back to LU
/// when the Cholesky factorization fails. `None` if `a` is singular or the
/// solution is not finite.
pub(crate) fn solve_sym(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => a.clone().lu().solve(b)?,
    };
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub(crate) fn inverse_sym(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = match a.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => a.clone().try_inverse()?,
    };
    if !inv.iter().all(|v| v.is_finite()) {
        return None;
    }
    // symmetrize away rounding
    Some((&inv + inv.transpose()) * 0.5)
}

/// Quadratic form `v' a^{-1} v`.
pub(crate) fn inv_quad_form(a: &DMatrix<f64>, v: &DVector<f64>) -> Option<f64> {
    let x = solve_sym(a, v)?;
    Some(v.dot(&x))
}
