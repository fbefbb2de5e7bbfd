//! Row-major array-of-arrays encoding for dense matrices.

use nalgebra::DMatrix;
use serde::Serializer;

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return None;
    }
    Some(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn rows<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(to_rows(m))
}
