//! Small dense linear-algebra helpers shared by the fitters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Orthonormal basis (as columns) of the null space of `c` (k x n).
///
/// Returns `None` when `c` is not of full row rank at relative tolerance `tol`.
pub fn null_space(c: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = c.ncols();
    let k = c.nrows();
    let gram = c.transpose() * c;
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let rank = eig.eigenvalues.iter().filter(|&&v| v > tol * max).count();
    if rank < k || max == 0.0 {
        return None;
    }
    let mut z = DMatrix::zeros(n, n - k);
    for (col, &i) in idx.iter().take(n - k).enumerate() {
        z.set_column(col, &eig.eigenvectors.column(i));
    }
    Some(z)
}

/// Numerical rank of a symmetric matrix by eigenvalue thresholding.
pub fn symmetric_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .fold(0.0_f64, f64::max);
    eig.eigenvalues
        .iter()
        .filter(|v| v.abs() > rel_tol * max)
        .count()
}

/// Sorted (ascending) eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn log_det_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// `diag(A M Aᵀ)` without forming the full product.
pub fn quad_diag(a: &DMatrix<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let am = a * m;
    DVector::from_iterator(a.nrows(), (0..a.nrows()).map(|i| am.row(i).dot(&a.row(i))))
}

/// Places `block` on the diagonal of `target` starting at `offset`.
pub fn add_block(target: &mut DMatrix<f64>, offset: usize, block: &DMatrix<f64>, scale: f64) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            target[(offset + i, offset + j)] += scale * block[(i, j)];
        }
    }
}
