//! Dense matrix kernels shared by the rest of the crate.
//!
//! Everything here works on [`Matrix`], a dynamically sized column-major
//! `f64` matrix. `vec` stacks columns, so the identity
//! `vec(X Y Z) = (Zᵀ ⊗ X) vec(Y)` holds with [`kron`] as written.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used when a matrix is documented symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

/// Induced norm selector for [`log_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogNormKind {
    One,
    Two,
    Infinity,
}

pub fn ensure_square(a: &Matrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Stack the columns of `a` into a single column vector.
pub fn vec(a: &Matrix) -> Matrix {
    Matrix::from_column_slice(a.len(), 1, a.as_slice())
}

/// Inverse of [`vec`] for a `rows x cols` target.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v)
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

pub fn is_symmetric(a: &Matrix, rel_tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).norm() <= rel_tol * a.norm().max(f64::MIN_POSITIVE)
}

/// `1_N 1_Nᵀ`.
pub fn ones(n: usize) -> Matrix {
    Matrix::from_element(n, n, 1.0)
}

pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stack matrices with equal column counts vertically.
pub fn vstack(blocks: &[Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen(a: &Matrix) -> Result<(Vector, Matrix)> {
    ensure_square(a)?;
    let eig = SymmetricEigen::try_new(symmetrize(a), EIG_EPS, EIG_MAX_ITER).ok_or(Error::EigenFailure)?;
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

pub fn sym_eigenvalues(a: &Matrix) -> Result<Vector> {
    Ok(sym_eigen(a)?.0)
}

pub fn max_sym_eigenvalue(a: &Matrix) -> Result<f64> {
    Ok(sym_eigenvalues(a)?[0])
}

pub fn min_sym_eigenvalue(a: &Matrix) -> Result<f64> {
    let v = sym_eigenvalues(a)?;
    Ok(v[v.len() - 1])
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex<f64>>> {
    ensure_square(a)?;
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(a.clone(), EIG_EPS, EIG_MAX_ITER).ok_or(Error::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// `α(a)`: the largest real part over the spectrum.
pub fn spectral_abscissa(a: &Matrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn singular_values(a: &Matrix) -> Vector {
    if a.is_empty() {
        return Vector::zeros(0);
    }
    let mut s = a.clone().svd(false, false).singular_values;
    s.as_mut_slice().sort_by(|x, y| y.total_cmp(x));
    s
}

/// Spectral norm `‖a‖₂`.
pub fn norm2(a: &Matrix) -> f64 {
    singular_values(a).iter().copied().fold(0.0, f64::max)
}

/// Logarithmic norm (matrix measure) of a square matrix.
pub fn log_norm(a: &Matrix, kind: LogNormKind) -> Result<f64> {
    let n = ensure_square(a)?;
    let v = match kind {
        LogNormKind::Two => max_sym_eigenvalue(a)?,
        LogNormKind::One => (0..n)
            .map(|j| a[(j, j)] + (0..n).filter(|&i| i != j).map(|i| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max),
        LogNormKind::Infinity => (0..n)
            .map(|i| a[(i, i)] + (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(v)
}

/// Matrix exponential (scaling and squaring with Padé approximants).
pub fn expm(a: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(a.clone());
    }
    Ok(a.exp())
}

/// Symmetric PSD square root. The input is symmetrized first; eigenvalues
/// down to `-1e-10·‖a‖₂` are clipped to zero, anything lower is an error.
pub fn sqrtm_psd(a: &Matrix) -> Result<Matrix> {
    ensure_square(a)?;
    if !is_symmetric(a, SYMMETRY_TOL) {
        return Err(Error::DimensionMismatch(
            "square root requested for a non-symmetric matrix".into(),
        ));
    }
    let (values, vectors) = sym_eigen(a)?;
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = -SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE);
    if let Some(&min) = values.iter().min_by(|x, y| x.total_cmp(y)) {
        if min < floor {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
        }
    }
    let roots = values.map(|v| v.max(0.0).sqrt());
    let r = &vectors * Matrix::from_diagonal(&roots) * vectors.transpose();
    Ok(symmetrize(&r))
}

/// Frobenius norm of the Kronecker sum `I_p ⊗ m + n ⊗ I_q` (m is q×q,
/// n is p×p) without forming it.
pub fn kron_sum_frobenius(m: &Matrix, n: &Matrix) -> f64 {
    let q = m.nrows() as f64;
    let p = n.nrows() as f64;
    let sq = p * m.norm_squared() + q * n.norm_squared() + 2.0 * m.trace() * n.trace();
    sq.max(0.0).sqrt()
}

/// Orthonormal basis of the column space, using a relative singular value cut.
pub fn range_basis(a: &Matrix, rel_tol: f64) -> Matrix {
    let rows = a.nrows();
    if a.ncols() == 0 || rows == 0 {
        return Matrix::zeros(rows, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > rel_tol * smax)
        .collect();
    let mut basis = Matrix::zeros(rows, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        basis.set_column(k, &u.column(i));
    }
    basis
}

/// Orthonormal basis of the null space of `a` (right singular vectors
/// whose singular value is below `abs_tol`).
pub fn null_basis(a: &Matrix, abs_tol: f64) -> Matrix {
    let cols = a.ncols();
    if cols == 0 {
        return Matrix::zeros(0, 0);
    }
    // Pad with zero rows so the SVD returns a full set of right vectors.
    let padded = if a.nrows() < cols {
        let mut p = Matrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= abs_tol)
        .collect();
    let mut basis = Matrix::zeros(cols, idx.len());
    for (k, &i) in idx.iter().enumerate() {
        basis.set_column(k, &vt.row(i).transpose());
    }
    basis
}

pub fn rank(a: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(a);
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * smax).count()
}

pub fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn kron_identities() {
        assert_eq!(kron(&Matrix::identity(2, 2), &Matrix::identity(3, 3)), Matrix::identity(6, 6));
        assert_eq!(kron(&ones(2), &m(1, 1, &[5.0])), m(2, 2, &[5.0, 5.0, 5.0, 5.0]));
        let a = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(1, 2, &[0.5, -1.0]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(k[(1, 2)], 4.0 * 0.5);
        assert_eq!(k[(0, 3)], 2.0 * -1.0);
    }

    #[test]
    fn vec_stacks_columns() {
        let a = m(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&a).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&Matrix::zeros(2, 3)), Matrix::zeros(6, 1));
        assert_eq!(unvec(vec(&a).as_slice(), 2, 2), a);
    }

    #[test]
    fn log_norm_examples() {
        let neg_i = -Matrix::identity(2, 2);
        assert!((log_norm(&neg_i, LogNormKind::Two).unwrap() + 1.0).abs() < 1e-15);
        let rot = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(log_norm(&rot, LogNormKind::Two).unwrap().abs() < 1e-15);
        let tri = m(2, 2, &[-2.0, 1.0, 0.0, -1.0]);
        assert_eq!(log_norm(&tri, LogNormKind::One).unwrap(), 0.0);
        assert_eq!(log_norm(&tri, LogNormKind::Infinity).unwrap(), -1.0);
        assert!(matches!(
            log_norm(&Matrix::zeros(2, 3), LogNormKind::One),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn spectral_abscissa_examples() {
        assert!((spectral_abscissa(&-Matrix::identity(3, 3)).unwrap() + 1.0).abs() < 1e-14);
        let rot = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(spectral_abscissa(&rot).unwrap().abs() < 1e-14);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![-1.0, -2.0]));
        assert!((spectral_abscissa(&d).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn expm_closed_forms() {
        assert_eq!(expm(&Matrix::zeros(3, 3)).unwrap(), Matrix::identity(3, 3));
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]));
        let e = expm(&d).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((e[(1, 1)] - 2f64.exp()).abs() < 1e-13);
        assert!(e[(0, 1)].abs() < 1e-15);
        assert!(expm(&Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn expm_finite_difference_derivative() {
        let a = m(3, 3, &[0.3, -1.2, 0.5, 0.8, -0.4, 0.1, -0.6, 0.9, 0.2]);
        let h = 1e-6;
        let fd = (expm(&(&a * h)).unwrap() - expm(&(&a * -h)).unwrap()) / (2.0 * h);
        assert!((fd - &a).norm() < 1e-8);
        let prod = expm(&a).unwrap() * expm(&-&a).unwrap();
        assert!((prod - Matrix::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn sqrtm_examples() {
        assert_eq!(sqrtm_psd(&Matrix::identity(4, 4)).unwrap(), Matrix::identity(4, 4));
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let r = sqrtm_psd(&d).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14 && (r[(1, 1)] - 3.0).abs() < 1e-14);
        let bad = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(sqrtm_psd(&bad), Err(Error::NotPositiveSemidefinite { .. })));
        let mm = m(4, 4, &[
            1.0, 0.2, -0.3, 0.0, 0.5, 2.0, 0.1, -1.0, 0.0, 0.3, 1.5, 0.4, -0.2, 0.0, 0.7, 0.9,
        ]);
        let a = mm.transpose() * &mm;
        let r = sqrtm_psd(&a).unwrap();
        assert!((&r * &r - &a).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn kron_sum_norm_matches_explicit() {
        let a = m(3, 3, &[1.0, -2.0, 0.5, 0.3, 0.0, 1.1, -0.7, 0.2, 2.0]);
        let b = m(2, 2, &[0.4, 1.0, -1.0, 3.0]);
        let explicit = kron(&Matrix::identity(2, 2), &a) + kron(&b, &Matrix::identity(3, 3));
        assert!((kron_sum_frobenius(&a, &b) - explicit.norm()).abs() < 1e-12);
    }

    #[test]
    fn null_and_range_bases() {
        let a = m(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let nb = null_basis(&a, 1e-12);
        assert_eq!(nb.ncols(), 1);
        assert!((nb[(2, 0)].abs() - 1.0).abs() < 1e-14);
        assert_eq!(range_basis(&a, 1e-12).ncols(), 2);
        assert_eq!(rank(&a, 1e-12), 2);
    }
}
