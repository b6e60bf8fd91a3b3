//! Concrete vector fields.

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

use super::VectorField;

/// Lorenz-96: `dx_j/dt = (x_{j+1} − x_{j−2}) x_{j−1} − x_j + F` with cyclic indices.
#[derive(Clone, Debug)]
pub struct Lorenz96 {
    dim: usize,
    forcing: f64,
}

impl Lorenz96 {
    pub fn new(dim: usize, forcing: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::DimensionTooSmall(dim));
        }
        Ok(Self { dim, forcing })
    }

    pub fn forcing(&self) -> f64 {
        self.forcing
    }
}

/// Lorenz-96 tendency for an arbitrary state.
pub fn lorenz96_tendency(x: &Vector, forcing: f64) -> Result<Vector> {
    let n = x.len();
    if n < 4 {
        return Err(Error::DimensionTooSmall(n));
    }
    Ok(Vector::from_fn(n, |j, _| {
        let jp1 = (j + 1) % n;
        let jm1 = (j + n - 1) % n;
        let jm2 = (j + n - 2) % n;
        (x[jp1] - x[jm2]) * x[jm1] - x[j] + forcing
    }))
}

impl VectorField for Lorenz96 {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tendency(&self, x: &Vector) -> Vector {
        lorenz96_tendency(x, self.forcing).expect("dimension checked at construction")
    }

    fn jacobian(&self, x: &Vector) -> Matrix {
        let n = self.dim;
        let mut j = Matrix::zeros(n, n);
        for r in 0..n {
            let rp1 = (r + 1) % n;
            let rm1 = (r + n - 1) % n;
            let rm2 = (r + n - 2) % n;
            j[(r, rm2)] -= x[rm1];
            j[(r, rm1)] += x[rp1] - x[rm2];
            j[(r, r)] -= 1.0;
            j[(r, rp1)] += x[rm1];
        }
        j
    }

    fn jacobian_action(&self, x: &Vector, v: &Vector) -> Vector {
        let n = self.dim;
        Vector::from_fn(n, |j, _| {
            let jp1 = (j + 1) % n;
            let jm1 = (j + n - 1) % n;
            let jm2 = (j + n - 2) % n;
            (x[jp1] - x[jm2]) * v[jm1] + x[jm1] * (v[jp1] - v[jm2]) - v[j]
        })
    }

    fn jacobian_transpose_action(&self, x: &Vector, u: &Vector) -> Vector {
        let n = self.dim;
        Vector::from_fn(n, |i, _| {
            let ip1 = (i + 1) % n;
            let ip2 = (i + 2) % n;
            let im1 = (i + n - 1) % n;
            let im2 = (i + n - 2) % n;
            u[ip1] * (x[ip2] - x[im1]) + u[im1] * x[im2] - u[ip2] * x[ip1] - u[i]
        })
    }
}

/// Linear autonomous system `dx/dt = A x`.
#[derive(Clone, Debug)]
pub struct LinearField {
    a: Matrix,
}

impl LinearField {
    pub fn new(a: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), found: a.ncols() });
        }
        if a.nrows() == 0 {
            return Err(Error::DimensionTooSmall(0));
        }
        Ok(Self { a })
    }

    /// `f ≡ 0`: every state is an equilibrium.
    pub fn zero(dim: usize) -> Self {
        Self { a: Matrix::zeros(dim, dim) }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn tendency(&self, x: &Vector) -> Vector {
        &self.a * x
    }

    fn jacobian(&self, _x: &Vector) -> Matrix {
        self.a.clone()
    }

    fn jacobian_action(&self, _x: &Vector, v: &Vector) -> Vector {
        &self.a * v
    }

    fn jacobian_transpose_action(&self, _x: &Vector, u: &Vector) -> Vector {
        self.a.tr_mul(u)
    }
}
