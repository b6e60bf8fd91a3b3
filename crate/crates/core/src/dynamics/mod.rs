//! Dynamical and observation models.
//!
//! A [`DynamicalModel`] wraps a [`VectorField`] with a fixed RK4 integration
//! step. The tangent-linear model is the exact derivative of the discrete RK4
//! map and the adjoint is its exact transpose, so dot-product identities hold
//! to rounding error.

mod models;
mod observation;

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;

pub use models::{lorenz96_tendency, LinearField, Lorenz96};
pub use observation::{observe, ElementwiseKind, Observation, ObservationMap, ObservationModel};

use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// Right-hand side `f` of an autonomous ODE `dx/dt = f(x)`.
pub trait VectorField: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn tendency(&self, x: &Vector) -> Vector;
    fn jacobian(&self, x: &Vector) -> Matrix;

    fn jacobian_action(&self, x: &Vector, v: &Vector) -> Vector {
        self.jacobian(x) * v
    }

    fn jacobian_transpose_action(&self, x: &Vector, u: &Vector) -> Vector {
        self.jacobian(x).tr_mul(u)
    }
}

/// State `x_k` at analysis time index `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub values: Vector,
    pub time_index: usize,
}

impl StateVector {
    pub fn new(values: Vector, time_index: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionTooSmall(0));
        }
        ensure_finite(&values)?;
        Ok(Self { values, time_index })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// States at consecutive analysis times.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
}

impl Trajectory {
    pub fn new(states: Vec<StateVector>) -> Result<Self> {
        for pair in states.windows(2) {
            if pair[1].time_index != pair[0].time_index + 1 {
                return Err(Error::Config("trajectory time indices must be consecutive".into()));
            }
            check_dim(pair[0].dim(), pair[1].dim())?;
        }
        Ok(Self { states })
    }

    /// Wraps plain vectors as states `start, start + 1, …`.
    pub fn from_vectors(start: usize, vectors: Vec<Vector>) -> Result<Self> {
        let states =
            vectors.into_iter().enumerate().map(|(i, v)| StateVector::new(v, start + i)).collect::<Result<Vec<_>>>()?;
        Self::new(states)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> Option<&StateVector> {
        self.states.first()
    }

    pub fn last(&self) -> Option<&StateVector> {
        self.states.last()
    }
}

pub(crate) fn ensure_finite(v: &Vector) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState)
    }
}

/// RK4-discretised flow of a vector field, sampled every `forecast_horizon`.
///
/// The model counts every RK4 step it takes on a single state vector; the
/// counter is shared by clones so scheme-level accounting survives cloning.
#[derive(Clone, Debug)]
pub struct DynamicalModel {
    field: Arc<dyn VectorField>,
    step_size: f64,
    substeps: usize,
    calls: Arc<AtomicU64>,
}

impl DynamicalModel {
    pub fn new(field: Arc<dyn VectorField>, step_size: f64, forecast_horizon: f64) -> Result<Self> {
        if !(step_size > 0.0) || !(forecast_horizon > 0.0) {
            return Err(Error::Config("step size and forecast horizon must be positive".into()));
        }
        let ratio = forecast_horizon / step_size;
        let substeps = ratio.round();
        if substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "forecast horizon {forecast_horizon} is not an integer multiple of step size {step_size}"
            )));
        }
        Ok(Self { field, step_size, substeps: substeps as usize, calls: Arc::new(AtomicU64::new(0)) })
    }

    /// Lorenz-96 with the usual twin-experiment integration settings.
    pub fn lorenz96(dim: usize, forcing: f64) -> Result<Self> {
        Self::new(Arc::new(Lorenz96::new(dim, forcing)?), 0.01, 0.05)
    }

    pub fn linear(a: Matrix, step_size: f64, forecast_horizon: f64) -> Result<Self> {
        Self::new(Arc::new(LinearField::new(a)?), step_size, forecast_horizon)
    }

    pub fn field(&self) -> &dyn VectorField {
        self.field.as_ref()
    }

    pub fn state_dim(&self) -> usize {
        self.field.dim()
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn forecast_horizon(&self) -> f64 {
        self.step_size * self.substeps as f64
    }

    /// Number of single-state RK4 steps taken so far.
    pub fn model_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_model_calls(&self) {
        self.calls.store(0, Ordering::Relaxed)
    }

    fn count(&self, steps: usize) {
        self.calls.fetch_add(steps as u64, Ordering::Relaxed);
    }

    fn rk4_raw(&self, x: &Vector, h: f64) -> Vector {
        let f = &self.field;
        let k1 = f.tendency(x);
        let k2 = f.tendency(&(x + &k1 * (0.5 * h)));
        let k3 = f.tendency(&(x + &k2 * (0.5 * h)));
        let k4 = f.tendency(&(x + &k3 * h));
        x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
    }

    /// One classical RK4 step of length `h`.
    pub fn rk4_step(&self, x: &Vector, h: f64) -> Result<Vector> {
        check_dim(self.state_dim(), x.len())?;
        if !(h > 0.0) {
            return Err(Error::Config("RK4 step must be positive".into()));
        }
        self.count(1);
        let out = self.rk4_raw(x, h);
        ensure_finite(&out)?;
        Ok(out)
    }

    /// Advances `x` by `steps` analysis intervals.
    pub fn forecast(&self, x: &Vector, steps: usize) -> Result<Vector> {
        check_dim(self.state_dim(), x.len())?;
        let mut state = x.clone();
        for _ in 0..steps * self.substeps {
            state = self.rk4_raw(&state, self.step_size);
        }
        self.count(steps * self.substeps);
        ensure_finite(&state)?;
        Ok(state)
    }

    /// Forecasts every column of `e` by `steps` intervals, in parallel.
    pub fn forecast_columns(&self, e: &Matrix, steps: usize) -> Result<Matrix> {
        let cols: Vec<Vector> = (0..e.ncols())
            .into_par_iter()
            .map(|j| self.forecast(&e.column(j).into_owned(), steps))
            .collect::<Result<_>>()?;
        Ok(Matrix::from_columns(&cols))
    }

    /// Applies `𝓜_{target:k}` to a state at time `k`; `target == k` is the identity.
    pub fn propagate(&self, x: &StateVector, target: usize) -> Result<StateVector> {
        if target < x.time_index {
            return Err(Error::Config(format!("cannot propagate backwards from {} to {target}", x.time_index)));
        }
        let values = self.forecast(&x.values, target - x.time_index)?;
        Ok(StateVector { values, time_index: target })
    }

    /// Nonlinear trajectory from `x` over `steps` intervals (both ends included).
    pub fn trajectory(&self, x: &StateVector, steps: usize) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x.clone());
        for _ in 0..steps {
            let next = self.propagate(states.last().expect("non-empty"), x.time_index + states.len())?;
            states.push(next);
        }
        Ok(Trajectory { states })
    }

    /// Forecasts one interval and records what the discrete tangent-linear
    /// and adjoint maps of that interval need.
    pub fn linearise(&self, x: &Vector) -> Result<(Vector, IntervalLinearisation)> {
        check_dim(self.state_dim(), x.len())?;
        let h = self.step_size;
        let f = &self.field;
        let mut stages = Vec::with_capacity(self.substeps);
        let mut state = x.clone();
        for _ in 0..self.substeps {
            let z1 = state.clone();
            let k1 = f.tendency(&z1);
            let z2 = &state + &k1 * (0.5 * h);
            let k2 = f.tendency(&z2);
            let z3 = &state + &k2 * (0.5 * h);
            let k3 = f.tendency(&z3);
            let z4 = &state + &k3 * h;
            let k4 = f.tendency(&z4);
            state = &state + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            stages.push([z1, z2, z3, z4]);
        }
        self.count(self.substeps);
        ensure_finite(&state)?;
        Ok((state, IntervalLinearisation { field: Arc::clone(&self.field), h, stages }))
    }

    /// Linearisations of every interval of a reference trajectory.
    fn linearise_reference(&self, reference: &Trajectory) -> Result<Vec<IntervalLinearisation>> {
        if reference.len() < 2 {
            return Ok(Vec::new());
        }
        reference.states[..reference.len() - 1].iter().map(|s| self.linearise(&s.values).map(|(_, lin)| lin)).collect()
    }
}

/// Discrete tangent-linear map of one analysis interval.
#[derive(Clone, Debug)]
pub struct IntervalLinearisation {
    field: Arc<dyn VectorField>,
    h: f64,
    stages: Vec<[Vector; 4]>,
}

impl IntervalLinearisation {
    /// `M δ`.
    pub fn apply(&self, delta: &Vector) -> Vector {
        let (f, h) = (&self.field, self.h);
        let mut d = delta.clone();
        for [z1, z2, z3, z4] in &self.stages {
            let dk1 = f.jacobian_action(z1, &d);
            let dk2 = f.jacobian_action(z2, &(&d + &dk1 * (0.5 * h)));
            let dk3 = f.jacobian_action(z3, &(&d + &dk2 * (0.5 * h)));
            let dk4 = f.jacobian_action(z4, &(&d + &dk3 * h));
            d += (dk1 + (dk2 + dk3) * 2.0 + dk4) * (h / 6.0);
        }
        d
    }

    /// `Mᵀ λ`, the transpose of [`apply`](Self::apply) stage by stage in reverse.
    pub fn apply_transpose(&self, lambda: &Vector) -> Vector {
        let (f, h) = (&self.field, self.h);
        let mut l = lambda.clone();
        for [z1, z2, z3, z4] in self.stages.iter().rev() {
            let a4 = &l * (h / 6.0);
            let l4 = f.jacobian_transpose_action(z4, &a4);
            let a3 = &l * (h / 3.0) + &l4 * h;
            let l3 = f.jacobian_transpose_action(z3, &a3);
            let a2 = &l * (h / 3.0) + &l3 * (0.5 * h);
            let l2 = f.jacobian_transpose_action(z2, &a2);
            let a1 = &l * (h / 6.0) + &l2 * (0.5 * h);
            let l1 = f.jacobian_transpose_action(z1, &a1);
            l += l1 + l2 + l3 + l4;
        }
        l
    }

    /// Dense resolvent `M`, built column by column.
    pub fn resolvent(&self) -> Matrix {
        let n = self.field.dim();
        let cols: Vec<Vector> = (0..n)
            .map(|j| {
                let mut e = Vector::zeros(n);
                e[j] = 1.0;
                self.apply(&e)
            })
            .collect();
        Matrix::from_columns(&cols)
    }
}

/// `M_{l:k} δ` along a reference trajectory running from `t_k` to `t_l`.
pub fn tangent_linear(model: &DynamicalModel, reference: &Trajectory, delta: &Vector) -> Result<Vector> {
    check_dim(model.state_dim(), delta.len())?;
    let lins = model.linearise_reference(reference)?;
    Ok(lins.iter().fold(delta.clone(), |d, lin| lin.apply(&d)))
}

/// `M_{l:k}ᵀ δ̃` along a reference trajectory, swept in reverse time order.
pub fn adjoint(model: &DynamicalModel, reference: &Trajectory, delta_tilde: &Vector) -> Result<Vector> {
    check_dim(model.state_dim(), delta_tilde.len())?;
    let lins = model.linearise_reference(reference)?;
    Ok(lins.iter().rev().fold(delta_tilde.clone(), |d, lin| lin.apply_transpose(&d)))
}

/// Free-function form of [`DynamicalModel::rk4_step`] on a time-stamped state.
pub fn rk4_step(model: &DynamicalModel, x: &StateVector, h: f64) -> Result<StateVector> {
    Ok(StateVector { values: model.rk4_step(&x.values, h)?, time_index: x.time_index })
}

/// Free-function form of [`DynamicalModel::propagate`].
pub fn propagate(model: &DynamicalModel, x: &StateVector, target: usize) -> Result<StateVector> {
    model.propagate(x, target)
}
