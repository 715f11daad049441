//! Scale-aware comparisons for mixed-unit matrices.
//!
//! Stiffness and compliance matrices mix N/mm, N/rad and N·mm/rad entries, so a
//! plain max-norm is dominated by the moment rows. The helpers here normalise
//! entry `(i, j)` by `sqrt(|a_ii| |a_jj|)`, which is invariant under any
//! change of length or angle unit.

use nalgebra::{DMatrix, Dim, Matrix, RawStorage};

fn diag_scale<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> Vec<f64> {
    let n = m.nrows().min(m.ncols());
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let floor = if max_diag > 0.0 { max_diag * 1e-30 } else { 1.0 };
    (0..n).map(|i| m[(i, i)].abs().max(floor)).collect()
}

/// Largest normalised gap `|a_ij - b_ij| / sqrt(|b_ii| |b_jj|)` between two
/// square matrices of equal size. `b` is the reference.
pub fn normalized_difference<R, C, S1, S2>(a: &Matrix<f64, R, C, S1>, b: &Matrix<f64, R, C, S2>) -> f64
where
    R: Dim,
    C: Dim,
    S1: RawStorage<f64, R, C>,
    S2: RawStorage<f64, R, C>,
{
    assert_eq!(a.shape(), b.shape());
    let d = diag_scale(b);
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let gap = (a[(i, j)] - b[(i, j)]).abs() / (d[i] * d[j]).sqrt();
            worst = worst.max(gap);
        }
    }
    worst
}

/// Normalised asymmetry of a square matrix.
pub fn relative_asymmetry<R, C, S>(m: &Matrix<f64, R, C, S>) -> f64
where
    R: Dim,
    C: Dim,
    S: RawStorage<f64, R, C>,
{
    let d = diag_scale(m);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let gap = (m[(i, j)] - m[(j, i)]).abs() / (d[i] * d[j]).sqrt();
            worst = worst.max(gap);
        }
    }
    worst
}

/// Plain relative difference in the max norm, `max|a - b| / max|b|`.
pub fn max_relative_difference<R, C, S1, S2>(a: &Matrix<f64, R, C, S1>, b: &Matrix<f64, R, C, S2>) -> f64
where
    R: Dim,
    C: Dim,
    S1: RawStorage<f64, R, C>,
    S2: RawStorage<f64, R, C>,
{
    let denom = b.amax();
    let gap = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if denom == 0.0 {
        gap
    } else {
        gap / denom
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
