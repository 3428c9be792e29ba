//! Dense row-major matrices and the handful of symmetric-matrix routines the
//! curvature code needs: eigendecomposition, damped inversion and
//! Kronecker-factored preconditioning.

use std::fmt;

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by routines that require symmetric input.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self.get(r, c))?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::structural(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::structural(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// A single column vector.
    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::structural(format!(
                "cannot stack {}-column matrix on {}-column matrix",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    /// Adds `lambda` to every diagonal entry.
    pub fn add_diag(&self, lambda: f64) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out.data[i * self.cols + i] += lambda;
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::structural(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, false)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, true, other, false)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, true)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::structural(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), v))
            .collect())
    }

    /// Largest relative deviation from symmetry, measured against the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst / scale
    }

    /// Replaces the matrix with `(M + M^T) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        for r in 0..n {
            for c in r + 1..n {
                let v = 0.5 * (self.get(r, c) + self.get(c, r));
                self.set(r, c, v);
                self.set(c, r, v);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != k2 {
        return Err(Error::structural(format!(
            "matmul: inner dimensions {k} and {k2} differ"
        )));
    }
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers above, and `c` is a
    // freshly allocated m x n buffer that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl SymmetricEigen {
    /// `Q diag(f(λ)) Q^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        let n = q.rows();
        for r in 0..n {
            for (c, &lam) in self.eigenvalues.iter().enumerate() {
                scaled.data[r * n + c] *= f(lam);
            }
        }
        let mut out = scaled.matmul_t(q).expect("square factors");
        out.symmetrize();
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

fn check_symmetric(m: &Matrix, op: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::structural(format!(
            "{op}: expected a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numerical(format!("{op}: non-finite entries")));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::structural(format!(
            "{op}: matrix is not symmetric (relative asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

pub fn sym_eig(m: &Matrix) -> Result<SymmetricEigen> {
    check_symmetric(m, "sym_eig")?;
    let n = m.rows;
    if n == 0 {
        return Ok(SymmetricEigen {
            eigenvalues: Vec::new(),
            eigenvectors: Matrix::zeros(0, 0),
        });
    }
    let sym = faer::Mat::<f64>::from_fn(n, n, |r, c| 0.5 * (m.data[r * n + c] + m.data[c * n + r]));
    let eig = sym
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numerical(format!("sym_eig: eigendecomposition did not converge ({e:?})")))?;
    let (vals, vecs) = (eig.S(), eig.U());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| vecs[(r, order[c])]);
    if eigenvalues.iter().any(|v| !v.is_finite()) || !eigenvectors.is_finite() {
        return Err(Error::Numerical("sym_eig: non-finite eigendecomposition".into()));
    }
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
    })
}

fn check_psd(eig: &SymmetricEigen, m: &Matrix, op: &str) -> Result<()> {
    let fro = frobenius_norm_sq(m).sqrt();
    if let Some(&lo) = eig.eigenvalues.first() {
        if lo < -1e-8 * fro {
            return Err(Error::domain(format!(
                "{op}: matrix is not positive semidefinite (smallest eigenvalue {lo:.3e})"
            )));
        }
    }
    Ok(())
}

/// `(M + lambda I)^{-1}` for symmetric positive semidefinite `M`.
pub fn damped_inverse(m: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::domain(format!("damping must be positive, got {lambda}")));
    }
    let eig = sym_eig(m)?;
    check_psd(&eig, m, "damped_inverse")?;
    Ok(eig.reconstruct_with(|mu| 1.0 / (mu.max(0.0) + lambda)))
}

/// Symmetric inverse square root `M^{-1/2}` of a positive definite matrix.
pub fn inverse_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    let top = eig.eigenvalues.last().copied().unwrap_or(0.0).abs();
    let lo = eig.eigenvalues.first().copied().unwrap_or(0.0);
    if lo <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::degenerate(format!(
            "matrix is rank deficient (eigenvalues span [{lo:.3e}, {top:.3e}])"
        )));
    }
    Ok(eig.reconstruct_with(|mu| 1.0 / mu.sqrt()))
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

pub fn trace(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::structural(format!(
            "trace of a non-square {}x{} matrix",
            m.rows, m.cols
        )));
    }
    Ok(m.diag().iter().sum())
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |r, c| {
        a.get(r / br, c / bc) * b.get(r % br, c % bc)
    })
}

/// Column-stacking vectorization.
pub fn vec_col(m: &Matrix) -> Vec<f64> {
    m.transpose().into_vec()
}

/// Inverse of [`vec_col`].
pub fn unvec_col(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    Ok(Matrix::from_vec(cols, rows, v.to_vec())?.transpose())
}

/// Where K-FAC damping enters the Kronecker-factored curvature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingMode {
    /// `(A + √λ I) ⊗ (S + √λ I)`: each factor gets √λ.
    #[default]
    Factored,
    /// `S ⊗ A + λ I`: damping on the assembled block, solved in the joint eigenbasis.
    Dense,
}

#[derive(Clone, Debug)]
enum Inverse {
    Factored { a_inv: Matrix, s_inv: Matrix },
    Dense {
        a: SymmetricEigen,
        s: SymmetricEigen,
        lambda: f64,
    },
}

/// Cached inverse of a damped Kronecker-factored block `S ⊗ A`.
///
/// `apply(V)` maps an `n_a x n_s` matrix `V` to the matrix whose column-stacked
/// vectorization is `(damped S ⊗ A)^{-1} vec(V)`.
#[derive(Clone, Debug)]
pub struct KronPreconditioner {
    inv: Inverse,
    dims: (usize, usize),
}

impl KronPreconditioner {
    pub fn new(a: &Matrix, s: &Matrix, lambda: f64, mode: DampingMode) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::domain(format!("damping must be positive, got {lambda}")));
        }
        let dims = (a.rows(), s.rows());
        let inv = match mode {
            DampingMode::Factored => {
                let root = lambda.sqrt();
                Inverse::Factored {
                    a_inv: damped_inverse(a, root)?,
                    s_inv: damped_inverse(s, root)?,
                }
            }
            DampingMode::Dense => {
                let ea = sym_eig(a)?;
                check_psd(&ea, a, "kron_precondition")?;
                let es = sym_eig(s)?;
                check_psd(&es, s, "kron_precondition")?;
                Inverse::Dense { a: ea, s: es, lambda }
            }
        };
        Ok(KronPreconditioner { inv, dims })
    }

    pub fn apply(&self, v: &Matrix) -> Result<Matrix> {
        if v.shape() != self.dims {
            return Err(Error::structural(format!(
                "kron_precondition: V is {:?}, factors need {:?}",
                v.shape(),
                self.dims
            )));
        }
        match &self.inv {
            Inverse::Factored { a_inv, s_inv } => a_inv.matmul(v)?.matmul(s_inv),
            Inverse::Dense { a, s, lambda } => {
                let qa = &a.eigenvectors;
                let qs = &s.eigenvectors;
                let mut rotated = qa.t_matmul(v)?.matmul(qs)?;
                for (i, &la) in a.eigenvalues.iter().enumerate() {
                    for (j, &ls) in s.eigenvalues.iter().enumerate() {
                        let denom = la.max(0.0) * ls.max(0.0) + lambda;
                        rotated.data[i * self.dims.1 + j] /= denom;
                    }
                }
                qa.matmul(&rotated)?.matmul_t(qs)
            }
        }
    }
}

/// `(A + √λ I)^{-1} V (S + √λ I)^{-1}`.
pub fn kron_precondition(a: &Matrix, s: &Matrix, v: &Matrix, lambda: f64) -> Result<Matrix> {
    if a.rows() != v.rows() || s.rows() != v.cols() {
        return Err(Error::structural(format!(
            "kron_precondition: A is {:?}, S is {:?}, V is {:?}",
            a.shape(),
            s.shape(),
            v.shape()
        )));
    }
    KronPreconditioner::new(a, s, lambda, DampingMode::Factored)?.apply(v)
}

/// Relative error `‖a − b‖ / max(‖b‖, floor)` between two equally sized slices.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm2(b).max(norm2(a)).max(1e-300);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let b = random(n, n + 2, rng);
        b.matmul_t(&b).unwrap()
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Matrix::identity(2)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0]);
        let e = sym_eig(&Matrix::from_diag(&[5.0, 2.0])).unwrap();
        assert!((e.eigenvalues[0] - 2.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = random(6, 6, &mut rng);
        m = m.add(&m.transpose()).unwrap();
        let e = sym_eig(&m).unwrap();
        let err = frobenius_norm_sq(&e.reconstruct().sub(&m).unwrap()).sqrt();
        assert!(err <= 1e-10 * frobenius_norm_sq(&m).sqrt());
        let qtq = e.eigenvectors.t_matmul(&e.eigenvectors).unwrap();
        assert!(qtq.sub(&Matrix::identity(6)).unwrap().max_abs() < 1e-10);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(Error::Structural(_))
        ));
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::Structural(_))));
    }

    #[test]
    fn damped_inverse_cases() {
        let z = damped_inverse(&Matrix::zeros(3, 3), 2.0).unwrap();
        assert!(z.sub(&Matrix::identity(3).scale(0.5)).unwrap().max_abs() < 1e-15);
        let i = damped_inverse(&Matrix::identity(3), 1.0).unwrap();
        assert!(i.sub(&Matrix::identity(3).scale(0.5)).unwrap().max_abs() < 1e-15);
        assert!(matches!(
            damped_inverse(&Matrix::identity(2), 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            damped_inverse(&Matrix::identity(2), -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn damped_inverse_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_psd(5, &mut rng);
        let inv = damped_inverse(&m, 1e-3).unwrap();
        let prod = m.add_diag(1e-3).matmul(&inv).unwrap();
        assert!(prod.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-8);
        assert!(inv.asymmetry() < 1e-10);
    }

    #[test]
    fn damped_inverse_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_psd(4, &mut rng);
        let mu = sym_eig(&m).unwrap().eigenvalues;
        let inv_eigs = sym_eig(&damped_inverse(&m, 0.3).unwrap()).unwrap().eigenvalues;
        let mut expected: Vec<f64> = mu.iter().map(|m| 1.0 / (m + 0.3)).collect();
        expected.sort_by(f64::total_cmp);
        assert!(rel_err(&inv_eigs, &expected) < 1e-8);
    }

    #[test]
    fn kron_precondition_identity_and_diagonal() {
        let v = Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]).unwrap();
        let out = kron_precondition(&Matrix::identity(2), &Matrix::identity(2), &v, 1e-16).unwrap();
        assert!(out.sub(&v).unwrap().max_abs() < 1e-6);

        let a = Matrix::identity(2).scale(4.0);
        let s = Matrix::identity(1);
        let v = Matrix::from_rows(&[&[8.0], &[4.0]]).unwrap();
        let out = kron_precondition(&a, &s, &v, 1e-14).unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-6);
        assert!((out.get(1, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kron_precondition_dimension_mismatch() {
        let r = kron_precondition(
            &Matrix::identity(3),
            &Matrix::identity(2),
            &Matrix::zeros(2, 2),
            1.0,
        );
        assert!(matches!(r, Err(Error::Structural(_))));
    }

    /// Dense oracle: assemble the damped Kronecker block and solve it directly.
    fn dense_solve(a: &Matrix, s: &Matrix, v: &Matrix, lambda: f64, mode: DampingMode) -> Matrix {
        let block = match mode {
            DampingMode::Factored => {
                let r = lambda.sqrt();
                kron(&s.add_diag(r), &a.add_diag(r))
            }
            DampingMode::Dense => kron(s, a).add_diag(lambda),
        };
        // Gaussian elimination, independent of the eigen route.
        let n = block.rows();
        let mut aug = block.clone();
        let mut rhs = vec_col(v);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| aug.get(i, col).abs().total_cmp(&aug.get(j, col).abs()))
                .unwrap();
            for c in 0..n {
                let t = aug.get(col, c);
                aug.set(col, c, aug.get(piv, c));
                aug.set(piv, c, t);
            }
            rhs.swap(col, piv);
            for r in col + 1..n {
                let f = aug.get(r, col) / aug.get(col, col);
                for c in col..n {
                    aug.add_at(r, c, -f * aug.get(col, c));
                }
                rhs[r] -= f * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let mut acc = rhs[r];
            for c in r + 1..n {
                acc -= aug.get(r, c) * x[c];
            }
            x[r] = acc / aug.get(r, r);
        }
        unvec_col(&x, v.rows(), v.cols()).unwrap()
    }

    #[test]
    fn kron_precondition_matches_dense_kronecker_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (na, ns) in [(3, 2), (1, 4), (6, 6), (2, 5)] {
            let a = random_psd(na, &mut rng);
            let s = random_psd(ns, &mut rng);
            let v = random(na, ns, &mut rng);
            for mode in [DampingMode::Factored, DampingMode::Dense] {
                for lambda in [1e-3, 0.5] {
                    let fast = KronPreconditioner::new(&a, &s, lambda, mode)
                        .unwrap()
                        .apply(&v)
                        .unwrap();
                    let slow = dense_solve(&a, &s, &v, lambda, mode);
                    assert!(
                        rel_err(fast.as_slice(), slow.as_slice()) < 1e-8,
                        "{mode:?} {na}x{ns} lambda={lambda}"
                    );
                }
            }
        }
    }

    #[test]
    fn norms_and_trace() {
        assert_eq!(frobenius_norm_sq(&Matrix::zeros(2, 2)), 0.0);
        assert_eq!(frobenius_norm_sq(&Matrix::from_rows(&[&[2.0]]).unwrap()), 4.0);
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_norm_sq(&m), 30.0);
        assert_eq!(trace(&Matrix::identity(3)).unwrap(), 3.0);
        assert_eq!(trace(&Matrix::from_diag(&[2.0, 5.0])).unwrap(), 7.0);
        assert!(trace(&Matrix::zeros(2, 3)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(4, 4, &mut rng);
        let hand = r.get(0, 0) + r.get(1, 1) + r.get(2, 2) + r.get(3, 3);
        assert_eq!(trace(&r).unwrap(), hand);
    }

    #[test]
    fn gemm_transposes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(4, 3, &mut rng);
        let b = random(4, 5, &mut rng);
        let via_t = a.transpose().matmul(&b).unwrap();
        let direct = a.t_matmul(&b).unwrap();
        assert!(via_t.sub(&direct).unwrap().max_abs() < 1e-14);
        let c = random(5, 3, &mut rng);
        let via_t = a.matmul(&c.transpose()).unwrap();
        assert!(via_t.sub(&a.matmul_t(&c).unwrap()).unwrap().max_abs() < 1e-14);
        // naive triple loop
        let naive = Matrix::from_fn(3, 5, |i, j| (0..4).map(|k| a.get(k, i) * b.get(k, j)).sum());
        assert!(naive.sub(&direct).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn kron_vec_identity() {
        // vec(A V S) = (S^T ⊗ A) vec(V)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(3, 3, &mut rng);
        let s = random(2, 2, &mut rng);
        let v = random(3, 2, &mut rng);
        let lhs = vec_col(&a.matmul(&v).unwrap().matmul(&s).unwrap());
        let rhs = kron(&s.transpose(), &a).matvec(&vec_col(&v)).unwrap();
        assert!(rel_err(&lhs, &rhs) < 1e-14);
    }
}
