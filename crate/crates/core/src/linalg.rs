//! Dense linear-algebra helpers: stability gates, Lyapunov and Riccati
//! fixed points, matrix powers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};
use crate::scalar::Real;

/// Relative tolerance of the Lyapunov/Riccati fixed-point iterations.
pub const FIXED_POINT_TOL: f64 = 1e-12;
/// Iteration cap of the Lyapunov/Riccati fixed-point iterations.
pub const FIXED_POINT_MAX_ITER: usize = 100_000;

pub fn frobenius<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt()
}

pub fn norm2<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt()
}

/// Largest eigenvalue modulus, from the real Schur form.
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> Result<T> {
    if !m.is_square() {
        return Err(SmpcError::dim("spectral radius of a non-square matrix"));
    }
    if m.nrows() == 0 {
        return Ok(T::zero());
    }
    let schur = m
        .clone()
        .try_schur(T::default_epsilon(), 10_000)
        .ok_or_else(|| SmpcError::numerical("Schur decomposition did not converge"))?;
    let eig = schur.complex_eigenvalues();
    Ok(eig
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .fold(T::zero(), |a, b| if b > a { b } else { a }))
}

/// Errors unless `m` is Schur stable; returns its spectral radius.
pub fn require_schur_stable<T: Real>(m: &DMatrix<T>, what: &str) -> Result<T> {
    let rho = spectral_radius(m)?;
    if rho >= T::one() {
        return Err(SmpcError::design(format!(
            "{what} is not Schur stable (spectral radius {:.6})",
            rho.as_f64()
        )));
    }
    Ok(rho)
}

/// Solves `Φᵀ P Φ + W = P` by the doubling form of the fixed-point iteration
/// (`P ← P + AᵀPA`, `A ← A²`), which converges quadratically.
pub fn discrete_lyapunov<T: Real>(phi: &DMatrix<T>, w: &DMatrix<T>) -> Result<DMatrix<T>> {
    let mut p = w.clone();
    let mut a = phi.clone();
    for _ in 0..FIXED_POINT_MAX_ITER {
        let inc = a.transpose() * &p * &a;
        let delta = frobenius(&inc);
        p += inc;
        if !delta.is_finite() {
            break;
        }
        if delta <= T::default_epsilon() * frobenius(&p).max(T::one()) {
            return Ok(symmetrize(&p));
        }
        a = &a * &a;
        if frobenius(&a) > T::lit(1e150) {
            break;
        }
    }
    Err(SmpcError::numerical(
        "Lyapunov fixed-point iteration did not converge",
    ))
}

/// Infinite-horizon discrete LQR by Riccati value iteration.
///
/// Returns `(K, P)` with `u = K x` and `P` the stabilizing Riccati solution.
pub fn dare<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let tol = T::tol(FIXED_POINT_TOL);
    let a_t = a.transpose();
    let b_t = b.transpose();
    let mut p = q.clone();
    for _ in 0..FIXED_POINT_MAX_ITER {
        let bp = &b_t * &p;
        let gram = r + &bp * b;
        let gain = gram
            .clone()
            .lu()
            .solve(&(&bp * a))
            .ok_or_else(|| SmpcError::numerical("singular R + BᵀPB in Riccati iteration"))?;
        let next = symmetrize(&(q + &a_t * &p * a - &a_t * &p * b * &gain));
        let delta = frobenius(&(&next - &p));
        let scale = frobenius(&next).max(T::one());
        p = next;
        if !delta.is_finite() {
            break;
        }
        if delta <= tol * scale {
            let bp = &b_t * &p;
            let k = -(r + &bp * b)
                .lu()
                .solve(&(&bp * a))
                .ok_or_else(|| SmpcError::numerical("singular R + BᵀPB at convergence"))?;
            return Ok((k, p));
        }
    }
    Err(SmpcError::numerical("Riccati iteration diverged"))
}

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// `[I, Φ, Φ², …, Φ^len−1]`.
pub fn powers<T: Real>(phi: &DMatrix<T>, len: usize) -> Vec<DMatrix<T>> {
    let n = phi.nrows();
    let mut out = Vec::with_capacity(len);
    let mut cur = DMatrix::<T>::identity(n, n);
    for _ in 0..len {
        let next = phi * &cur;
        out.push(cur);
        cur = next;
    }
    out
}

/// Whether `m` is positive definite (Cholesky succeeds).
pub fn is_positive_definite<T: Real>(m: &DMatrix<T>) -> bool {
    m.is_square() && symmetrize(m).cholesky().is_some()
}

/// Whether `m` is positive semi-definite up to a relative tolerance.
pub fn is_positive_semidefinite<T: Real>(m: &DMatrix<T>) -> bool {
    if !m.is_square() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let sym = symmetrize(m);
    let scale = frobenius(&sym).max(T::one());
    let eig = sym.symmetric_eigenvalues();
    eig.iter().all(|&l| l >= -T::tol(1e-10) * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_radius_of_rotation_is_its_scale() {
        let c = 0.8f64;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -c, c, 0.0]);
        assert_relative_eq!(spectral_radius(&m).unwrap(), c, epsilon = 1e-12);
    }

    #[test]
    fn scalar_lyapunov_matches_geometric_series() {
        let phi = DMatrix::from_element(1, 1, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let p = discrete_lyapunov(&phi, &w).unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-11);
    }

    #[test]
    fn unstable_matrix_is_rejected() {
        let m = DMatrix::from_element(1, 1, 2.0);
        let err = require_schur_stable(&m, "Φ").unwrap_err();
        assert!(err.to_string().contains("2.000000"));
    }

    #[test]
    fn psd_checks() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(is_positive_semidefinite(&m));
        assert!(!is_positive_definite(&m));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(!is_positive_semidefinite(&neg));
    }
}
