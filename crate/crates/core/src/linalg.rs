//! Small dense-matrix helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Largest absolute element of `m - mᵀ`.
pub(crate) fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a (nearly) symmetric matrix.
///
/// The input is symmetrized first so that tolerance-level asymmetry does not
/// perturb the decomposition. Returns 0.0 for the empty matrix.
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Scale factor `1 + trace/dim` used by the relative PSD and conditioning
/// tolerances.
pub(crate) fn trace_scale(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    1.0 + m.trace() / m.nrows() as f64
}

/// Stack `top` over `bottom` (column counts must match).
pub(crate) fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), (top.nrows(), top.ncols()))
        .copy_from(top);
    out.view_mut((top.nrows(), 0), (bottom.nrows(), bottom.ncols()))
        .copy_from(bottom);
    out
}

/// Select the given rows of a vector, in order.
pub(crate) fn select_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// Select the given rows of a matrix, in order, keeping all columns.
pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Select the given rows and columns of a matrix, in order.
pub(crate) fn select_sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defect_and_eigen() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-3, 5.0]);
        assert!((symmetry_defect(&m) - 1e-3).abs() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert_eq!(min_eigenvalue(&s), 2.0);
    }

    #[test]
    fn stacking_and_selection() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let s = vstack(&a, &b);
        assert_eq!(s.nrows(), 3);
        assert_eq!(s[(2, 1)], 6.0);
        assert_eq!(select_rows(&s, &[0, 2])[(1, 0)], 5.0);
        assert_eq!(select_sub(&s, &[1], &[1])[(0, 0)], 4.0);
        let v = DVector::from_row_slice(&[7.0, 8.0, 9.0]);
        assert_eq!(select_vec(&v, &[2, 0]).as_slice(), &[9.0, 7.0]);
    }
}
