//! Symmetric matrix pencils `C - λB` with `B` positive definite.
//!
//! The pencil is reduced to a standard symmetric eigenproblem through the
//! Cholesky factor of `B` and then diagonalised with cyclic Jacobi sweeps.
//! Spectral projectors of a single symmetric operator and the restriction of a
//! pencil to the positive invariant subspace are built on the same kernel.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const MAX_JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PencilError {
    #[error("matrix {which} is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { which: &'static str, asymmetry: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite: Cholesky pivot {pivot} is {value:.6e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("degenerate operator: eigenvalue {eigenvalue:.6e} within {threshold:.3e} of zero")]
    DegeneratePencil { eigenvalue: f64, threshold: f64 },
    #[error("positive invariant subspace is empty")]
    EmptyPositiveSubspace,
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
}

/// Tolerances used by the pencil routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PencilTolerances {
    /// Relative symmetry tolerance: `‖M − Mᵀ‖∞ ≤ symmetry · (1 + ‖M‖∞)`.
    pub symmetry: f64,
    /// An eigenvalue of `C` with `|λ| ≤ degeneracy · ‖C‖₂` makes `C` degenerate.
    pub degeneracy: f64,
}

impl Default for PencilTolerances {
    fn default() -> Self {
        Self {
            symmetry: 1e-12,
            degeneracy: 1e-10,
        }
    }
}

fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_symmetric(m: &Matrix, which: &'static str, tol: f64) -> Result<(), PencilError> {
    if !m.is_square() {
        return Err(PencilError::DimensionMismatch(format!(
            "{which} is {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = inf_norm(&(m - m.transpose()));
    if asym > tol * (1.0 + inf_norm(m)) {
        return Err(PencilError::NotSymmetric {
            which,
            asymmetry: asym,
        });
    }
    Ok(())
}

/// Pencil `C − λB`, `C` symmetric, `B` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPencil {
    c: Matrix,
    b: Matrix,
}

impl SymmetricPencil {
    pub fn new(c: Matrix, b: Matrix) -> Result<Self, PencilError> {
        Self::with_tolerances(c, b, &PencilTolerances::default())
    }

    pub fn with_tolerances(
        c: Matrix,
        b: Matrix,
        tol: &PencilTolerances,
    ) -> Result<Self, PencilError> {
        check_symmetric(&c, "C", tol.symmetry)?;
        check_symmetric(&b, "B", tol.symmetry)?;
        if c.nrows() != b.nrows() {
            return Err(PencilError::DimensionMismatch(format!(
                "C is {n}x{n}, B is {m}x{m}",
                n = c.nrows(),
                m = b.nrows()
            )));
        }
        Ok(Self { c, b })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }
}

/// Characteristic values in ascending order with `B`-orthonormal eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilSpectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vector>,
}

impl PencilSpectrum {
    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// The characteristic value of largest modulus (sign preserved).
    pub fn max_abs(&self) -> f64 {
        let (lo, hi) = (self.min(), self.max());
        if lo.abs() > hi.abs() {
            lo
        } else {
            hi
        }
    }
}

/// Lower-triangular Cholesky factor `L` with `B = L Lᵀ`.
pub fn cholesky(b: &Matrix) -> Result<Matrix, PencilError> {
    let n = b.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = b[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(PencilError::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = b[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L y = r` for lower-triangular `L`, column by column.
fn forward_substitute(l: &Matrix, r: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut y = r.clone();
    for col in 0..r.ncols() {
        for i in 0..n {
            let mut s = y[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * y[(k, col)];
            }
            y[(i, col)] = s / l[(i, i)];
        }
    }
    y
}

/// Solves `Lᵀ y = r` for lower-triangular `L`.
fn backward_substitute_transposed(l: &Matrix, r: &Matrix) -> Matrix {
    let n = l.nrows();
    let mut y = r.clone();
    for col in 0..r.ncols() {
        for i in (0..n).rev() {
            let mut s = y[(i, col)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[(k, col)];
            }
            y[(i, col)] = s / l[(i, i)];
        }
    }
    y
}

/// Solves `B y = r` through the Cholesky factor of `B`.
pub fn spd_solve(b: &Matrix, r: &Vector) -> Result<Vector, PencilError> {
    let l = cholesky(b)?;
    let rm = Matrix::from_column_slice(r.len(), 1, r.as_slice());
    let y = backward_substitute_transposed(&l, &forward_substitute(&l, &rm));
    Ok(Vector::from_column_slice(y.as_slice()))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as the columns of the second component.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix), PencilError> {
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = Matrix::identity(n, n);
    let scale = a.norm();
    if n > 1 && scale > 0.0 {
        let target = (f64::EPSILON * scale).powi(2);
        let mut converged = false;
        for _ in 0..MAX_JACOBI_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += 2.0 * a[(p, q)] * a[(p, q)];
                }
            }
            if off <= target {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        if !converged {
            return Err(PencilError::NoConvergence(MAX_JACOBI_SWEEPS));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok((values, vectors))
}

/// Characteristic values and `B`-orthonormal eigenvectors of `C − λB`.
pub fn solve_pencil(p: &SymmetricPencil) -> Result<PencilSpectrum, PencilError> {
    let l = cholesky(&p.b)?;
    // M = L⁻¹ C L⁻ᵀ
    let y = forward_substitute(&l, &p.c);
    let m = forward_substitute(&l, &y.transpose());
    let (eigenvalues, q) = symmetric_eigen(&m)?;
    let x = backward_substitute_transposed(&l, &q);
    let eigenvectors = (0..p.n()).map(|j| x.column(j).into_owned()).collect();
    Ok(PencilSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// `(λ₋, λ⁺)`: extreme characteristic values, i.e. the extrema of `⟨Cx,x⟩`
/// over `⟨Bx,x⟩ = 1`.
pub fn lambda_extremes(p: &SymmetricPencil) -> Result<(f64, f64), PencilError> {
    let s = solve_pencil(p)?;
    Ok((s.min(), s.max()))
}

/// Orthogonal projectors onto the positive and negative invariant subspaces
/// of a nondegenerate symmetric operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorPair {
    pub plus: Matrix,
    pub minus: Matrix,
    pub n_plus: usize,
    pub n_minus: usize,
    /// Orthonormal eigenvectors spanning the positive subspace (columns).
    pub plus_basis: Matrix,
    /// Orthonormal eigenvectors spanning the negative subspace (columns).
    pub minus_basis: Matrix,
    pub plus_eigenvalues: Vec<f64>,
    pub minus_eigenvalues: Vec<f64>,
}

pub fn spectral_projectors(c: &Matrix) -> Result<ProjectorPair, PencilError> {
    spectral_projectors_with(c, &PencilTolerances::default())
}

pub fn spectral_projectors_with(
    c: &Matrix,
    tol: &PencilTolerances,
) -> Result<ProjectorPair, PencilError> {
    check_symmetric(c, "C", tol.symmetry)?;
    let n = c.nrows();
    let (values, vectors) = symmetric_eigen(c)?;
    let norm2 = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let threshold = tol.degeneracy * norm2;
    if let Some(&bad) = values.iter().find(|v| v.abs() <= threshold) {
        return Err(PencilError::DegeneratePencil {
            eigenvalue: bad,
            threshold,
        });
    }
    let neg: Vec<usize> = (0..n).filter(|&i| values[i] < 0.0).collect();
    let pos: Vec<usize> = (0..n).filter(|&i| values[i] > 0.0).collect();
    let basis = |idx: &[usize]| {
        let mut m = Matrix::zeros(n, idx.len());
        for (k, &i) in idx.iter().enumerate() {
            m.set_column(k, &vectors.column(i));
        }
        m
    };
    let plus_basis = basis(&pos);
    let minus_basis = basis(&neg);
    Ok(ProjectorPair {
        plus: &plus_basis * plus_basis.transpose(),
        minus: &minus_basis * minus_basis.transpose(),
        n_plus: pos.len(),
        n_minus: neg.len(),
        plus_eigenvalues: pos.iter().map(|&i| values[i]).collect(),
        minus_eigenvalues: neg.iter().map(|&i| values[i]).collect(),
        plus_basis,
        minus_basis,
    })
}

/// `C₊ = P₊ C P₊` and `C₋ = P₋ C P₋`.
pub fn signed_parts(c: &Matrix, proj: &ProjectorPair) -> (Matrix, Matrix) {
    let cp = &proj.plus * c * &proj.plus;
    let cm = &proj.minus * c * &proj.minus;
    ((&cp + cp.transpose()) * 0.5, (&cm + cm.transpose()) * 0.5)
}

/// Minimal characteristic value of the pencil restricted to `range(P₊)`.
pub fn lambda_minus_plus(p: &SymmetricPencil, proj: &ProjectorPair) -> Result<f64, PencilError> {
    if proj.n_plus == 0 {
        return Err(PencilError::EmptyPositiveSubspace);
    }
    let v = &proj.plus_basis;
    let vt = v.transpose();
    let restricted = SymmetricPencil::new(&vt * p.c() * v, &vt * p.b() * v)?;
    Ok(solve_pencil(&restricted)?.min())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_column_slice(v))
    }

    #[test]
    fn diagonal_pencil() {
        let p = SymmetricPencil::new(diag(&[2.0, -3.0]), Matrix::identity(2, 2)).unwrap();
        let s = solve_pencil(&p).unwrap();
        assert_eq!(s.eigenvalues, vec![-3.0, 2.0]);
    }

    #[test]
    fn identity_pencil() {
        let b = Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = solve_pencil(&SymmetricPencil::new(b.clone(), b).unwrap()).unwrap();
        for l in s.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extremes() {
        let p = SymmetricPencil::new(diag(&[1.0, -1.0]), Matrix::identity(2, 2)).unwrap();
        assert_eq!(lambda_extremes(&p).unwrap(), (-1.0, 1.0));
        let z = SymmetricPencil::new(Matrix::zeros(3, 3), diag(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(lambda_extremes(&z).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn cholesky_reports_pivot() {
        let b = diag(&[1.0, 2.0, -1.0]);
        let p = SymmetricPencil::new(Matrix::identity(3, 3), b).unwrap();
        match solve_pencil(&p) {
            Err(PencilError::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let c = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            SymmetricPencil::new(c, Matrix::identity(2, 2)),
            Err(PencilError::NotSymmetric { which: "C", .. })
        ));
    }

    #[test]
    fn projectors_of_diagonal() {
        let pp = spectral_projectors(&diag(&[1.0, -1.0])).unwrap();
        assert_eq!(pp.plus, diag(&[1.0, 0.0]));
        assert_eq!(pp.minus, diag(&[0.0, 1.0]));
        let pd = spectral_projectors(&diag(&[1.0, 2.0])).unwrap();
        assert_eq!(pd.plus, Matrix::identity(2, 2));
        assert_eq!(pd.minus, Matrix::zeros(2, 2));
        assert_eq!((pd.n_plus, pd.n_minus), (2, 0));
    }

    #[test]
    fn degenerate_operator() {
        assert!(matches!(
            spectral_projectors(&diag(&[1.0, 0.0])),
            Err(PencilError::DegeneratePencil { .. })
        ));
        assert!(matches!(
            spectral_projectors(&Matrix::zeros(2, 2)),
            Err(PencilError::DegeneratePencil { .. })
        ));
    }

    #[test]
    fn signed_parts_diagonal() {
        let c = diag(&[1.0, -1.0]);
        let pp = spectral_projectors(&c).unwrap();
        let (cp, cm) = signed_parts(&c, &pp);
        assert_eq!(cp, diag(&[1.0, 0.0]));
        assert_eq!(cm, diag(&[0.0, -1.0]));
        let c = diag(&[3.0, 1.0]);
        let (cp, cm) = signed_parts(&c, &spectral_projectors(&c).unwrap());
        assert_eq!(cp, c);
        assert_eq!(cm, Matrix::zeros(2, 2));
    }

    #[test]
    fn restricted_minimum() {
        let c = diag(&[1.0, -1.0]);
        let p = SymmetricPencil::new(c.clone(), Matrix::identity(2, 2)).unwrap();
        let pp = spectral_projectors(&c).unwrap();
        assert!((lambda_minus_plus(&p, &pp).unwrap() - 1.0).abs() < 1e-15);
        let c = diag(&[3.0, 2.0, -1.0]);
        let p = SymmetricPencil::new(c.clone(), Matrix::identity(3, 3)).unwrap();
        let pp = spectral_projectors(&c).unwrap();
        assert!((lambda_minus_plus(&p, &pp).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn empty_positive_subspace() {
        let c = diag(&[-1.0, -2.0]);
        let p = SymmetricPencil::new(c.clone(), Matrix::identity(2, 2)).unwrap();
        let pp = spectral_projectors(&c).unwrap();
        assert_eq!(
            lambda_minus_plus(&p, &pp),
            Err(PencilError::EmptyPositiveSubspace)
        );
    }

    #[test]
    fn spd_solve_matches_product() {
        let b = Matrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = Vector::from_column_slice(&[1.0, 2.0]);
        let y = spd_solve(&b, &r).unwrap();
        assert!((&b * y - r).norm() < 1e-14);
    }
}
