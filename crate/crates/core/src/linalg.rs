//! Thin bridge between `ndarray` storage and `nalgebra` dense factorizations.
//!
//! Every system solved in this crate is at most S×S, so dense direct
//! factorizations are used throughout.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

pub(crate) fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.dim();
    DMatrix::from_fn(rows, cols, |i, j| a[[i, j]])
}

/// Solves `a x = b`. Tries a Cholesky factorization first (all dual systems
/// are symmetric positive definite) and falls back to LU.
pub(crate) fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let m = to_dmatrix(a);
    let rhs = DVector::from_iterator(b.len(), b.iter().copied());
    let x = match m.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => m.lu().solve(&rhs)?,
    };
    if x.iter().all(|v| v.is_finite()) {
        Some(Array1::from_iter(x.iter().copied()))
    } else {
        None
    }
}

/// Solves `a x = b` with partial-pivot LU only, for non-symmetric systems.
pub(crate) fn solve_general(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let rhs = DVector::from_iterator(b.len(), b.iter().copied());
    let x = to_dmatrix(a).lu().solve(&rhs)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(Array1::from_iter(x.iter().copied()))
    } else {
        None
    }
}

/// Minimum-norm solution of `a x = b` for symmetric positive semidefinite `a`;
/// eigenvalues below `rcond · λ_max` are treated as zero.
pub(crate) fn pinv_solve_symmetric(a: &Array2<f64>, b: &Array1<f64>, rcond: f64) -> Array1<f64> {
    let m = to_dmatrix(a);
    let eigen = ((&m + m.transpose()) * 0.5).symmetric_eigen();
    let top = eigen.eigenvalues.iter().copied().fold(0.0, f64::max);
    let rhs = DVector::from_iterator(b.len(), b.iter().copied());
    let mut coeffs = eigen.eigenvectors.transpose() * rhs;
    for (c, value) in coeffs.iter_mut().zip(eigen.eigenvalues.iter()) {
        *c = if *value > rcond * top { *c / value } else { 0.0 };
    }
    let x = eigen.eigenvectors * coeffs;
    Array1::from_iter(x.iter().copied())
}

fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let m = to_dmatrix(a);
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().collect()
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub(crate) fn min_eigenvalue_symmetric(a: &Array2<f64>) -> f64 {
    symmetric_eigenvalues(a).into_iter().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part of `a`.
pub(crate) fn max_eigenvalue_symmetric(a: &Array2<f64>) -> f64 {
    symmetric_eigenvalues(a).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn l2_norm<'a, I>(values: I) -> f64
where
    I: IntoIterator<Item = &'a f64>,
{
    values.into_iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn l2_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
