//! Dense linear-algebra helpers shared by the decomposition and estimation code.
//!
//! Idempotents are carried as orthonormal bases `B` with `M = B B'`, which keeps
//! products between families at `n × rank` cost instead of `n³`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default tolerance for idempotency, orthogonality and balance checks (max-norm).
pub const DEFAULT_TOL: f64 = 1e-9;

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Orthogonalize `v` against the columns stored in `basis` (two passes of
/// modified Gram-Schmidt).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(b, v);
            axpy(-c, b, v);
        }
    }
}

fn columns_to_matrix(rows: usize, cols: Vec<Vec<f64>>) -> DMatrix<f64> {
    let k = cols.len();
    let mut data = Vec::with_capacity(rows * k);
    for c in cols {
        data.extend(c);
    }
    DMatrix::from_vec(rows, k, data)
}

/// Orthonormal basis of the column space of `a`. Columns whose residual norm
/// falls below `rel_tol` times the largest column norm are treated as dependent.
pub fn orthonormal_range(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    orthonormal_range_against(a, None, rel_tol)
}

/// Orthonormal basis of the part of `range(a)` orthogonal to the columns of
/// `against` (which must already be orthonormal).
pub fn orthonormal_range_against(a: &DMatrix<f64>, against: Option<&DMatrix<f64>>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let fixed: Vec<Vec<f64>> = against
        .map(|m| (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect())
        .unwrap_or_default();
    let scale = (0..a.ncols()).map(|j| a.column(j).norm()).fold(0.0_f64, f64::max);
    let mut out: Vec<Vec<f64>> = Vec::new();
    if scale == 0.0 {
        return DMatrix::zeros(n, 0);
    }
    for j in 0..a.ncols() {
        let mut v: Vec<f64> = a.column(j).iter().copied().collect();
        orthogonalize(&mut v, &fixed);
        orthogonalize(&mut v, &out);
        let norm = dot(&v, &v).sqrt();
        if norm > rel_tol * scale {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    columns_to_matrix(n, out)
}

/// Orthonormal basis of the orthogonal complement of the (orthonormal) columns of `b`
/// inside `R^m`, where `m = b.nrows()`.
pub fn orthonormal_complement(b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.nrows();
    let target = m - b.ncols();
    let mut basis: Vec<Vec<f64>> = (0..b.ncols()).map(|j| b.column(j).iter().copied().collect()).collect();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(target);
    for i in 0..m {
        if out.len() == target {
            break;
        }
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        orthogonalize(&mut v, &basis);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v.clone());
            out.push(v);
        }
    }
    columns_to_matrix(m, out)
}

/// Symmetric eigendecomposition with a residual check.
///
/// nalgebra's implicit QR can stop early on matrices with repeated eigenvalues and
/// return eigenvectors that are off by O(0.1). When `M W - W Λ` is not small the
/// decomposition is redone with a much tighter deflation threshold.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = max_abs(m).max(f64::MIN_POSITIVE);
    let residual = |e: &SymmetricEigen<f64, nalgebra::Dyn>| {
        max_abs(&(m * &e.eigenvectors - &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues))) / scale
    };
    let first = residual(&eig);
    if first < 1e-10 {
        return eig;
    }
    match m.clone().try_symmetric_eigen(1e-20, 100_000) {
        Some(retry) if residual(&retry) < first => retry,
        _ => eig,
    }
}

/// Moore-Penrose inverse of a symmetric matrix via eigendecomposition; eigenvalues
/// below `rel_tol` times the largest magnitude are dropped.
pub fn sym_pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetric_eigen(m);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if top > 0.0 && lam.abs() > rel_tol * top {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// Eigen-factor of a positive semidefinite matrix: returns `W Λ^{1/2}` restricted to
/// eigenvalues above `rel_tol` times the largest.
pub fn psd_sqrt_factor(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = symmetric_eigen(m);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cols: Vec<Vec<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &lam)| top > 0.0 && lam > rel_tol * top)
        .map(|(k, &lam)| eig.eigenvectors.column(k).iter().map(|x| x * lam.sqrt()).collect())
        .collect();
    columns_to_matrix(n, cols)
}

/// Numerical rank by singular values above `rel_tol` times the largest.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().fold(0.0_f64, |a, v| a.max(*v));
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Orthonormal basis of the row space of `m` (as columns), with singular threshold.
pub fn row_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let c = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::zeros(c, 0);
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.iter().fold(0.0_f64, |a, v| a.max(*v));
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| top > 0.0 && s > rel_tol * top)
        .map(|(i, _)| i)
        .collect();
    let mut out = DMatrix::zeros(c, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        out.set_column(j, &vt.row(i).transpose());
    }
    out
}

/// Apply the projector `B B'` to a vector.
pub fn project(basis: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    basis * (basis.transpose() * y)
}

/// Gather rows: `out[i, :] = m[index[i], :]`, i.e. `X m` for an incidence matrix `X`.
pub fn gather_rows(m: &DMatrix<f64>, index: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(index.len(), m.ncols(), |i, j| m[(index[i], j)])
}

/// Scatter-add rows: `X' m` for the incidence matrix of `index` onto `target` rows.
pub fn scatter_rows(m: &DMatrix<f64>, index: &[usize], target: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(target, m.ncols());
    for (i, &t) in index.iter().enumerate() {
        for j in 0..m.ncols() {
            out[(t, j)] += m[(i, j)];
        }
    }
    out
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormal bases of equal dimension.
pub fn subspace_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() != b.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    if a.ncols() == 0 {
        return 0.0;
    }
    // sin of the largest principal angle is the spectral norm of (I - AA')B.
    let resid = b - a * (a.transpose() * b);
    let s = resid
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v));
    s.min(1.0).asin()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_of_dependent_columns_has_correct_rank() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 0.0, 1.0, 2.0, 1.0]);
        let b = orthonormal_range(&a, 1e-9);
        assert_eq!(b.ncols(), 2);
        assert!(max_abs(&(b.transpose() * &b - DMatrix::identity(2, 2))) < 1e-12);
    }

    #[test]
    fn complement_completes_basis() {
        let a = DMatrix::from_row_slice(4, 1, &[0.5, 0.5, 0.5, 0.5]);
        let c = orthonormal_complement(&a);
        assert_eq!(c.ncols(), 3);
        assert!(max_abs(&(a.transpose() * &c)) < 1e-12);
    }

    #[test]
    fn pinv_of_projector_is_itself() {
        let p = DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert!(max_abs(&(sym_pinv(&p, 1e-9) - &p)) < 1e-12);
    }

    #[test]
    fn angle_between_equal_spaces_is_zero() {
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 0.0]);
        assert!(subspace_angle(&a, &b) < 1e-12);
    }
}
