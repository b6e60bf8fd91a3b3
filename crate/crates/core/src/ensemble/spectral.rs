//! Symmetric matrices of the form `c I + V diag(d − c) Vᵀ`.
//!
//! The ensemble-space Hessian `(N_e − 1) I + SᵀS` has this shape with `V`
//! the right singular vectors of the whitened observed anomalies `S`, so
//! functions of it (inverse, inverse square root) act on `r ≤ min(N_y, N_e)`
//! directions only. This keeps `N_e = 10⁴` ensembles cheap.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::linalg::symmetrise;
use crate::{Matrix, Vector};

#[derive(Clone, Debug)]
pub struct SpectralSym {
    dim: usize,
    /// Eigenvalue on the orthogonal complement of `basis`.
    floor: f64,
    /// Orthonormal columns.
    basis: Matrix,
    values: Vector,
}

impl SpectralSym {
    /// `floor · I + SᵀS` for an `m × n` matrix `S`.
    ///
    /// An orthonormal basis `Q` of the column span of `Sᵀ` comes from a
    /// Householder QR; the complement lies in the null space of `S`, so the
    /// matrix reduces to the small eigenproblem `floor · I + (SQ)ᵀ(SQ)`.
    pub fn shifted_gram(floor: f64, s: &Matrix) -> Result<Self> {
        let n = s.ncols();
        if !(floor > 0.0) {
            return Err(Error::SingularHessian);
        }
        if s.nrows() == 0 {
            return Ok(Self { dim: n, floor, basis: Matrix::zeros(n, 0), values: Vector::zeros(0) });
        }
        let q = s.transpose().qr().q();
        let sq = s * &q;
        let reduced = symmetrise(&(sq.tr_mul(&sq))) + Matrix::identity(q.ncols(), q.ncols()) * floor;
        let eig = SymmetricEigen::new(reduced);
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularHessian);
        }
        Ok(Self { dim: n, floor, basis: q * eig.eigenvectors, values: eig.eigenvalues })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Applies `f` to every eigenvalue.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dim: self.dim, floor: f(self.floor), basis: self.basis.clone(), values: self.values.map(&f) }
    }

    /// `A v`.
    pub fn apply_vec(&self, v: &Vector) -> Vector {
        let coeffs = self.basis.tr_mul(v);
        let scaled = coeffs.component_mul(&self.values.map(|d| d - self.floor));
        v * self.floor + &self.basis * scaled
    }

    /// `M A`, computed without forming `A`.
    pub fn right_multiply(&self, m: &Matrix) -> Matrix {
        let mv = m * &self.basis;
        let scaled = mv * Matrix::from_diagonal(&self.values.map(|d| d - self.floor));
        m * self.floor + scaled * self.basis.transpose()
    }

    pub fn to_dense(&self) -> Matrix {
        let correction =
            &self.basis * Matrix::from_diagonal(&self.values.map(|d| d - self.floor)) * self.basis.transpose();
        Matrix::identity(self.dim, self.dim) * self.floor + correction
    }
}
