//! Small dense helpers shared by the likelihood, calculus and EM code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Cholesky factorization that also rejects numerically singular matrices.
///
/// A factor is accepted only if every pivot is finite and positive and the
/// squared ratio of the smallest to the largest pivot is at least machine
/// epsilon (a cheap reciprocal-condition proxy).
pub(crate) fn checked_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for j in 0..m.nrows() {
        let p = l[(j, j)];
        if !(p.is_finite() && p > 0.0) {
            return None;
        }
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if m.nrows() > 0 && (lo / hi).powi(2) < f64::EPSILON {
        return None;
    }
    Some(chol)
}

/// Log-determinant from a Cholesky factor.
pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|j| l[(j, j)].ln()).sum::<f64>()
}

/// Index of entry `(row, col)` (with `row >= col`) inside the half-vector.
///
/// Columns of the lower triangle are stacked, so column `c` contributes
/// `D - c` entries starting at the diagonal.
pub(crate) fn half_vec_index(dim: usize, row: usize, col: usize) -> usize {
    debug_assert!(row >= col && row < dim);
    col * dim - col * col.saturating_sub(1) / 2 + (row - col)
}

/// Iterator over lower-triangle positions in half-vector order.
pub(crate) fn lower_positions(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(move |c| (c..dim).map(move |r| (r, c)))
}

pub(crate) fn half_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean Euclidean distance between two stacked parameter vectors, i.e. the
/// Euclidean norm of the difference divided by the vector length.
pub(crate) fn mean_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a - b).norm() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_vec_index_matches_enumeration() {
        for dim in 1..6 {
            for (idx, (r, c)) in lower_positions(dim).enumerate() {
                assert_eq!(half_vec_index(dim, r, c), idx, "dim {dim} ({r},{c})");
            }
        }
    }

    #[test]
    fn checked_cholesky_rejects_rank_deficient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(checked_cholesky(&m).is_none());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(checked_cholesky(&ok).is_some());
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        let v = [-1000.0, -1001.0, -999.5];
        let direct = (v.iter().map(|x| (x + 1000.0_f64).exp()).sum::<f64>()).ln() - 1000.0;
        assert!((log_sum_exp(v.iter().copied()) - direct).abs() < 1e-12);
    }
}
