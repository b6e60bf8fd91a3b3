//! Observation operators `y = 𝓗(x) + ε`, `ε ~ N(0, R)`.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::linalg::SymPosDef;
use crate::rng::{standard_normal_vector, Rng};
use crate::{Matrix, Vector};

/// Pointwise transform applied to selected state components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Identity,
    /// `x ↦ x²`
    Square,
    /// `x ↦ sign(x)|x|^p`
    SignedPower(f64),
}

impl ElementwiseKind {
    fn value(self, x: f64) -> f64 {
        match self {
            ElementwiseKind::Identity => x,
            ElementwiseKind::Square => x * x,
            ElementwiseKind::SignedPower(p) => x.signum() * x.abs().powf(p),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            ElementwiseKind::Identity => 1.0,
            ElementwiseKind::Square => 2.0 * x,
            ElementwiseKind::SignedPower(p) => {
                if x == 0.0 {
                    if p > 1.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    p * x.abs().powf(p - 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObservationMap {
    /// `𝓗(x) = H x`
    Linear(Matrix),
    /// `𝓗(x)_i = g(x_{c_i})` for observed components `c`.
    Elementwise { components: Vec<usize>, kind: ElementwiseKind },
}

/// Observation map with its error covariance.
#[derive(Clone, Debug)]
pub struct ObservationModel {
    map: ObservationMap,
    state_dim: usize,
    cov: SymPosDef,
}

impl ObservationModel {
    pub fn new(map: ObservationMap, state_dim: usize, cov: SymPosDef) -> Result<Self> {
        let obs_dim = match &map {
            ObservationMap::Linear(h) => {
                check_dim(state_dim, h.ncols())?;
                h.nrows()
            }
            ObservationMap::Elementwise { components, .. } => {
                if let Some(&c) = components.iter().find(|&&c| c >= state_dim) {
                    return Err(Error::DimensionMismatch { expected: state_dim, found: c + 1 });
                }
                components.len()
            }
        };
        if obs_dim == 0 {
            return Err(Error::DimensionTooSmall(0));
        }
        check_dim(obs_dim, cov.dim())?;
        Ok(Self { map, state_dim, cov })
    }

    pub fn linear(h: Matrix, cov: SymPosDef) -> Result<Self> {
        let n = h.ncols();
        Self::new(ObservationMap::Linear(h), n, cov)
    }

    /// Full identity observation with `R = r I`.
    pub fn identity(state_dim: usize, r: f64) -> Result<Self> {
        Self::elementwise(state_dim, (0..state_dim).collect(), ElementwiseKind::Identity, r)
    }

    /// Component selection / pointwise transform with `R = r I`.
    pub fn elementwise(state_dim: usize, components: Vec<usize>, kind: ElementwiseKind, r: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let cov = SymPosDef::scaled_identity(components.len(), r);
        Self::new(ObservationMap::Elementwise { components, kind }, state_dim, cov)
    }

    pub fn map(&self) -> &ObservationMap {
        &self.map
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn cov(&self) -> &SymPosDef {
        &self.cov
    }

    /// Same map with a different error covariance.
    pub fn with_cov(&self, cov: SymPosDef) -> Result<Self> {
        Self::new(self.map.clone(), self.state_dim, cov)
    }

    pub fn is_linear(&self) -> bool {
        match &self.map {
            ObservationMap::Linear(_) => true,
            ObservationMap::Elementwise { kind, .. } => match kind {
                ElementwiseKind::Identity => true,
                ElementwiseKind::SignedPower(p) => *p == 1.0,
                ElementwiseKind::Square => false,
            },
        }
    }

    /// `𝓗(x)` without noise.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.state_dim, x.len())?;
        Ok(match &self.map {
            ObservationMap::Linear(h) => h * x,
            ObservationMap::Elementwise { components, kind } => {
                Vector::from_iterator(components.len(), components.iter().map(|&c| kind.value(x[c])))
            }
        })
    }

    /// `𝓗` applied to every column.
    pub fn apply_columns(&self, e: &Matrix) -> Result<Matrix> {
        check_dim(self.state_dim, e.nrows())?;
        Ok(match &self.map {
            ObservationMap::Linear(h) => h * e,
            ObservationMap::Elementwise { components, kind } => {
                Matrix::from_fn(components.len(), e.ncols(), |i, j| kind.value(e[(components[i], j)]))
            }
        })
    }

    /// Jacobian `H(x)`.
    pub fn jacobian(&self, x: &Vector) -> Result<Matrix> {
        check_dim(self.state_dim, x.len())?;
        Ok(match &self.map {
            ObservationMap::Linear(h) => h.clone(),
            ObservationMap::Elementwise { components, kind } => {
                let mut h = Matrix::zeros(components.len(), self.state_dim);
                for (i, &c) in components.iter().enumerate() {
                    h[(i, c)] = kind.derivative(x[c]);
                }
                h
            }
        })
    }

    /// `H(x) X` without forming `H`.
    pub fn jacobian_product(&self, x: &Vector, xs: &Matrix) -> Result<Matrix> {
        check_dim(self.state_dim, x.len())?;
        check_dim(self.state_dim, xs.nrows())?;
        Ok(match &self.map {
            ObservationMap::Linear(h) => h * xs,
            ObservationMap::Elementwise { components, kind } => {
                Matrix::from_fn(components.len(), xs.ncols(), |i, j| {
                    let c = components[i];
                    kind.derivative(x[c]) * xs[(c, j)]
                })
            }
        })
    }

    /// `H(x) v` without forming `H`.
    pub fn jacobian_action(&self, x: &Vector, v: &Vector) -> Result<Vector> {
        check_dim(self.state_dim, x.len())?;
        check_dim(self.state_dim, v.len())?;
        Ok(match &self.map {
            ObservationMap::Linear(h) => h * v,
            ObservationMap::Elementwise { components, kind } => {
                Vector::from_iterator(components.len(), components.iter().map(|&c| kind.derivative(x[c]) * v[c]))
            }
        })
    }

    /// `H(x)ᵀ u` without forming `H`.
    pub fn jacobian_transpose_action(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        check_dim(self.state_dim, x.len())?;
        check_dim(self.obs_dim(), u.len())?;
        Ok(match &self.map {
            ObservationMap::Linear(h) => h.tr_mul(u),
            ObservationMap::Elementwise { components, kind } => {
                let mut out = Vector::zeros(self.state_dim);
                for (i, &c) in components.iter().enumerate() {
                    out[c] += kind.derivative(x[c]) * u[i];
                }
                out
            }
        })
    }

    /// Draw from `N(0, R)`.
    pub fn sample_noise(&self, rng: &mut Rng) -> Vector {
        let z = standard_normal_vector(rng, self.obs_dim());
        self.cov.lower() * z
    }
}

/// `𝓗(x)`, plus a draw from `N(0, R)` when a generator is supplied.
pub fn observe(obs: &ObservationModel, x: &Vector, noise: Option<&mut Rng>) -> Result<Vector> {
    let mut y = obs.apply(x)?;
    if let Some(rng) = noise {
        y += obs.sample_noise(rng);
    }
    Ok(y)
}

/// A realised observation `y_k` together with the operator that produced it.
#[derive(Clone, Debug)]
pub struct Observation {
    pub operator: Arc<ObservationModel>,
    pub y: Vector,
}

impl Observation {
    pub fn new(operator: Arc<ObservationModel>, y: Vector) -> Result<Self> {
        check_dim(operator.obs_dim(), y.len())?;
        Ok(Self { operator, y })
    }
}
