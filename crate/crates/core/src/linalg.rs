use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Column means over the selected rows.
pub(crate) fn mean_rows(x: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
    let mut m = DVector::zeros(x.ncols());
    for &i in rows {
        for j in 0..x.ncols() {
            m[j] += x[(i, j)];
        }
    }
    m / rows.len() as f64
}

/// Scatter matrix of the selected rows around `center`, divided by `divisor`.
pub(crate) fn scatter_rows(x: &DMatrix<f64>, rows: &[usize], center: &DVector<f64>, divisor: f64) -> DMatrix<f64> {
    let d = x.ncols();
    let mut s = DMatrix::zeros(d, d);
    let mut c = DVector::zeros(d);
    for &i in rows {
        for j in 0..d {
            c[j] = x[(i, j)] - center[j];
        }
        s.ger(1.0, &c, &c, 1.0);
    }
    s / divisor
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in decreasing order.
pub(crate) fn sym_eigen_desc(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &k) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(k));
    }
    (vals, vecs)
}

/// Symmetric square root and inverse square root; eigenvalues clipped at `1e-12`.
pub(crate) fn sym_sqrt_pair(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (vals, vecs) = sym_eigen_desc(m.clone());
    if !(vals[0] > 0.0) {
        return Err(Error::SingularScatter);
    }
    let root = vals.map(|v| v.max(1e-12).sqrt());
    let sqrt = &vecs * DMatrix::from_diagonal(&root) * vecs.transpose();
    let inv = &vecs * DMatrix::from_diagonal(&root.map(|r| 1.0 / r)) * vecs.transpose();
    Ok((sqrt, inv))
}

/// Squared Mahalanobis distances of every row of `x`.
pub(crate) fn mahalanobis_sq(x: &DMatrix<f64>, center: &DVector<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> Vec<f64> {
    let n = x.nrows();
    let d = x.ncols();
    let l = chol.l();
    let mut out = Vec::with_capacity(n);
    let mut c = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            c[j] = x[(i, j)] - center[j];
        }
        // Solve L v = c by forward substitution; |v|^2 = c' S^-1 c.
        let mut ss = 0.0;
        let mut v = vec![0.0; d];
        for r in 0..d {
            let mut acc = c[r];
            for k in 0..r {
                acc -= l[(r, k)] * v[k];
            }
            v[r] = acc / l[(r, r)];
            ss += v[r] * v[r];
        }
        out.push(ss);
    }
    out
}

/// Indices of the `h` smallest values, ties broken by index; returned sorted.
pub(crate) fn smallest_indices(values: &[f64], h: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if h < idx.len() {
        idx.select_nth_unstable_by(h, |&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        idx.truncate(h);
    }
    idx.sort_unstable();
    idx
}
