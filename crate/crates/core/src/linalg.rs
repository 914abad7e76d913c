//! Thin adapter between `ndarray` storage and the dense factorizations in
//! `faer`.
//!
//! Every tensor in this crate is stored as an `ndarray` array; only the
//! factorizations (SVD, QR, Hermitian eigendecomposition) go through `faer`.

use faer::{Mat, Side};
use ndarray::Array2;
use num_complex::Complex64 as C64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular value decomposition did not converge")]
    Svd,
    #[error("Hermitian eigendecomposition did not converge")]
    Eigen,
}

pub(crate) fn to_faer(a: &Array2<C64>) -> Mat<C64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_faer(m: faer::MatRef<'_, C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Thin SVD `a = u · diag(s) · vh` with singular values in nonincreasing
/// order.
pub fn svd(a: &Array2<C64>) -> Result<(Array2<C64>, Vec<f64>, Array2<C64>), LinalgError> {
    let m = to_faer(a);
    let dec = m.thin_svd().map_err(|_| LinalgError::Svd)?;
    let u = from_faer(dec.U());
    let v = dec.V();
    let k = v.ncols();
    let vh = Array2::from_shape_fn((k, v.nrows()), |(i, j)| v[(j, i)].conj());
    let s = dec.S().column_vector().iter().map(|x| x.re).collect();
    Ok((u, s, vh))
}

/// Thin QR `a = q · r` with `q` having orthonormal columns.
pub fn qr(a: &Array2<C64>) -> (Array2<C64>, Array2<C64>) {
    let m = to_faer(a);
    let dec = m.qr();
    let q = dec.compute_thin_Q();
    let r = dec.thin_R();
    (from_faer(q.as_ref()), from_faer(r))
}

/// Eigendecomposition of a Hermitian matrix; eigenvalues ascending, the
/// eigenvectors are the columns of the returned matrix.
pub fn eigh(a: &Array2<C64>) -> Result<(Vec<f64>, Array2<C64>), LinalgError> {
    let m = to_faer(a);
    let dec = m.self_adjoint_eigen(Side::Lower).map_err(|_| LinalgError::Eigen)?;
    let vals = dec.S().column_vector().iter().map(|x| x.re).collect();
    Ok((vals, from_faer(dec.U())))
}

/// Eigendecomposition of a real symmetric matrix given in `faer` form.
pub fn eigh_real(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>), LinalgError> {
    let dec = a.self_adjoint_eigen(Side::Lower).map_err(|_| LinalgError::Eigen)?;
    let vals = dec.S().column_vector().iter().copied().collect();
    Ok((vals, dec.U().to_owned()))
}

/// `exp(-i z h)` for Hermitian `h` and complex `z`. Real `z` gives a unitary
/// propagator, `z = -i τ` gives the imaginary-time factor `exp(-τ h)`.
pub fn expm_hermitian(h: &Array2<C64>, z: C64) -> Result<Array2<C64>, LinalgError> {
    let (vals, vecs) = eigh(h)?;
    let n = h.nrows();
    let phases: Vec<C64> = vals.iter().map(|&l| (-C64::i() * z * l).exp()).collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        (0..n).map(|k| vecs[[i, k]] * phases[k] * vecs[[j, k]].conj()).sum()
    }))
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<C64>) -> Result<f64, LinalgError> {
    let s = to_faer(a).singular_values().map_err(|_| LinalgError::Svd)?;
    Ok(s.first().copied().unwrap_or(0.0))
}

pub fn dagger(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|x| x.conj())
}

/// Kronecker product `a ⊗ b` with `a` acting on the most significant index.
pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| {
        a[[i / br, j / bc]] * b[[i % br, j % bc]]
    })
}

pub fn max_abs_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn svd_reconstructs() {
        let a = array![[c(1.0, 0.5), c(2.0, 0.0), c(0.0, -1.0)], [c(0.3, 0.0), c(-1.0, 1.0), c(4.0, 0.0)]];
        let (u, s, vh) = svd(&a).unwrap();
        assert!(s[0] >= s[1]);
        let us = Array2::from_shape_fn(u.dim(), |(i, j)| u[[i, j]] * s[j]);
        assert!(max_abs_diff(&us.dot(&vh), &a) < 1e-12);
    }

    #[test]
    fn qr_reconstructs_with_isometric_q() {
        let a = Array2::from_shape_fn((5, 3), |(i, j)| c((i * 3 + j) as f64 * 0.1, (i as f64 - j as f64).sin()));
        let (q, r) = qr(&a);
        assert!(max_abs_diff(&q.dot(&r), &a) < 1e-12);
        let qq = dagger(&q).dot(&q);
        assert!(max_abs_diff(&qq, &Array2::eye(3).mapv(|x: f64| c(x, 0.0))) < 1e-12);
    }

    #[test]
    fn pauli_x_exponential() {
        let x = array![[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]];
        let u = expm_hermitian(&x, c(0.3, 0.0)).unwrap();
        assert!((u[[0, 0]] - c(0.3f64.cos(), 0.0)).norm() < 1e-14);
        assert!((u[[0, 1]] - c(0.0, -(0.3f64.sin()))).norm() < 1e-14);
    }
}
