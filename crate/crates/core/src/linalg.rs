//! Dense kernels shared by every estimator: Cholesky factors, symmetric
//! inverse square roots, left pseudo-inverses and weighted norms.

use nalgebra::linalg::{Cholesky, SymmetricEigen};
use nalgebra::Dyn;

use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_FLOOR: f64 = 1e-12;
const RANK_TOL: f64 = 1e-12;

/// A symmetric positive-definite matrix together with its Cholesky factor.
///
/// Construction fails unless the factorisation succeeds, so holding a
/// `SymPosDef` is proof that solves and log-determinants are well defined.
#[derive(Clone, Debug)]
pub struct SymPosDef {
    matrix: Matrix,
    chol: Cholesky<f64, Dyn>,
}

impl SymPosDef {
    /// Checks symmetry to 1e-12 relative, then factorises.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotPositiveDefinite);
        }
        Self::from_symmetrised(m)
    }

    /// Replaces `m` by `(m + mᵀ)/2` before factorising. Used for matrices
    /// produced by floating-point products that are symmetric in exact
    /// arithmetic.
    pub fn from_symmetrised(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        let m = symmetrise(&m);
        let chol = Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?;
        // nalgebra accepts a zero pivot in some corner cases; reject it here.
        if chol.l_dirty().diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { matrix: m, chol })
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self::from_symmetrised(Matrix::identity(n, n) * s).expect("positive scalar multiple of identity")
    }

    pub fn from_diagonal(d: &Vector) -> Result<Self> {
        Self::from_symmetrised(Matrix::from_diagonal(d))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    /// Lower-triangular `L` with `L Lᵀ = self`.
    pub fn lower(&self) -> Matrix {
        self.chol.l()
    }

    /// `self⁻¹ v`.
    pub fn solve(&self, v: &Vector) -> Vector {
        self.chol.solve(v)
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> Matrix {
        symmetrise(&self.chol.inverse())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ v`, so that `‖whiten(v)‖² = vᵀ self⁻¹ v`.
    pub fn whiten(&self, v: &Vector) -> Vector {
        let l = self.chol.l();
        l.solve_lower_triangular(v).expect("Cholesky factor has a positive diagonal")
    }

    /// `L⁻¹ B` applied column by column.
    pub fn whiten_matrix(&self, b: &Matrix) -> Matrix {
        let l = self.chol.l();
        l.solve_lower_triangular(b).expect("Cholesky factor has a positive diagonal")
    }

    /// `vᵀ self⁻¹ v`.
    pub fn quad_form(&self, v: &Vector) -> f64 {
        self.whiten(v).norm_squared()
    }
}

/// A tall matrix with full column rank.
#[derive(Clone, Debug)]
pub struct TallFactor {
    matrix: Matrix,
}

impl TallFactor {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.ncols() == 0 || a.ncols() > a.nrows() {
            return Err(Error::RankDeficient);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        let sv = a.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if !(max > 0.0) || min <= RANK_TOL * max {
            return Err(Error::RankDeficient);
        }
        Ok(Self { matrix: a })
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }
}

pub fn symmetrise(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky_factor(m: &SymPosDef) -> TallFactor {
    TallFactor { matrix: m.lower() }
}

/// The unique symmetric positive-definite `S` with `S S m = I`.
pub fn sym_inv_sqrt(m: &SymPosDef) -> Result<SymPosDef> {
    let s = sym_inv_sqrt_matrix(m.matrix())?;
    SymPosDef::from_symmetrised(s)
}

/// Inverse symmetric square root of a symmetric matrix via its
/// eigendecomposition; eigenvalues below 1e-12 are rejected.
pub fn sym_inv_sqrt_matrix(m: &Matrix) -> Result<Matrix> {
    let eig = SymmetricEigen::new(symmetrise(m));
    if eig.eigenvalues.iter().any(|&l| !(l > EIGEN_FLOOR)) {
        return Err(Error::NotPositiveDefinite);
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrise(&(v * Matrix::from_diagonal(&d) * v.transpose())))
}

/// Left Moore-Penrose pseudo-inverse `(AᵀA)⁻¹Aᵀ`.
pub fn pseudo_inverse(a: &TallFactor) -> Result<Matrix> {
    let at = a.matrix.transpose();
    let gram = &at * &a.matrix;
    let chol = Cholesky::new(symmetrise(&gram)).ok_or(Error::RankDeficient)?;
    Ok(chol.solve(&at))
}

/// Weight for [`mahalanobis_norm`]: either a covariance or a factor whose
/// column span carries the norm.
#[derive(Clone, Copy, Debug)]
pub enum Weight<'a> {
    Covariance(&'a SymPosDef),
    Factor(&'a TallFactor),
}

/// `√(vᵀ C⁻¹ v)` for a covariance `C`, or `‖A†v‖` for a factor `A`.
///
/// The factor form is a seminorm: components of `v` outside the span of `A`
/// are ignored, and for `v = A w` it returns `‖w‖`.
pub fn mahalanobis_norm(v: &Vector, weight: Weight<'_>) -> Result<f64> {
    match weight {
        Weight::Covariance(c) => {
            check_dim(c.dim(), v.len())?;
            Ok(c.quad_form(v).sqrt())
        }
        Weight::Factor(a) => {
            check_dim(a.rows(), v.len())?;
            Ok((pseudo_inverse(a)? * v).norm())
        }
    }
}
