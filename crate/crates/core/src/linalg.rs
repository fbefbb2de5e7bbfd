//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold for positive definiteness.
pub const PD_RELATIVE_TOL: f64 = 1e-12;

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m).max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut vals: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

/// Eigendecomposition with eigenvalues sorted in decreasing order; columns of
/// the returned matrix are the matching unit eigenvectors.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        vecs.set_column(col, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Smallest eigenvalue exceeds `PD_RELATIVE_TOL` times the largest.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let vals = sym_eigenvalues(m);
    let lo = vals[0];
    let hi = vals[vals.len() - 1];
    hi > 0.0 && lo > PD_RELATIVE_TOL * hi
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !is_positive_definite(m) {
        return Err(Error::NotPositiveDefinite);
    }
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)
}

pub fn logdet_pd(m: &DMatrix<f64>) -> Result<f64> {
    let ch = cholesky(m)?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn inverse_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = cholesky(m)?.inverse();
    Ok(symmetrize(&inv))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue of a symmetric matrix.
pub fn operator_norm_sym(m: &DMatrix<f64>) -> f64 {
    let vals = sym_eigenvalues(m);
    vals.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_positive_definite(m) {
        return Err(Error::NotPositiveDefinite);
    }
    let eig = SymmetricEigen::new(m.clone());
    let d = DVector::from_iterator(m.nrows(), eig.eigenvalues.iter().map(|v| 1.0 / v.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}
