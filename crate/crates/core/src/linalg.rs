use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FpcaError, Result};

pub(crate) fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = rows.len();
    for r in rows {
        crate::curves::check_len(r, m)?;
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

pub(crate) fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let m = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in i + 1..m {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn require_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    let asym = max_asymmetry(a);
    if asym > tol {
        return Err(FpcaError::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
pub(crate) fn sorted_eigen(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let m = a.nrows();
    // exact symmetry for the solver
    let sym = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clipped to zero.
pub(crate) fn psd_sqrt(a: DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sorted_eigen(a);
    let roots = DVector::from_iterator(values.len(), values.iter().map(|&v| v.max(0.0).sqrt()));
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * roots[c]
    });
    &scaled * vectors.transpose()
}
