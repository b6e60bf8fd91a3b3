//! Python bindings. Vectors are lists of floats, matrices are lists of rows.

use std::sync::Arc;

use dalab::dynamics::{DynamicalModel, Lorenz96, ObservationModel};
use dalab::ensemble::{etkf_analysis as etkf_apply, etkf_transform, inflate};
use dalab::gaussian::{EnsembleMatrix, GaussianBelief};
use dalab::harness::{run_experiment as run_config, ExperimentConfig};
use dalab::kalman::{kf_analysis as kf_update, BeliefKind, KalmanState};
use dalab::linalg::{self, SymPosDef};
use dalab::{Error, Matrix, Vector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::FilterDivergence { .. } | Error::NonFiniteState | Error::MaxIterationsExceeded(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vector(v: Vec<f64>) -> Vector {
    Vector::from_vec(v)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn spd(rows_in: Vec<Vec<f64>>) -> PyResult<SymPosDef> {
    SymPosDef::new(matrix(rows_in)?).map_err(to_py)
}

/// Discrete-time forecast model integrated with RK4.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: DynamicalModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (dim, forcing = 8.0, step_size = 0.01, forecast_horizon = 0.05))]
    fn lorenz96(dim: usize, forcing: f64, step_size: f64, forecast_horizon: f64) -> PyResult<Self> {
        let field = Lorenz96::new(dim, forcing).map_err(to_py)?;
        let inner = DynamicalModel::new(Arc::new(field), step_size, forecast_horizon).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// `dx/dt = A x`.
    #[staticmethod]
    #[pyo3(signature = (a, step_size = 0.01, forecast_horizon = 0.05))]
    fn linear(a: Vec<Vec<f64>>, step_size: f64, forecast_horizon: f64) -> PyResult<Self> {
        let inner = DynamicalModel::linear(matrix(a)?, step_size, forecast_horizon).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    /// Advances `x` by `steps` forecast intervals.
    #[pyo3(signature = (x, steps = 1))]
    fn forecast(&self, x: Vec<f64>, steps: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.forecast(&vector(x), steps).map_err(to_py)?.iter().copied().collect())
    }

    /// Resolvent of one interval's tangent-linear model about `x`.
    fn tangent_linear(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let (_, lin) = self.inner.linearise(&vector(x)).map_err(to_py)?;
        Ok(rows(&lin.resolvent()))
    }

    #[getter]
    fn model_calls(&self) -> u64 {
        self.inner.model_calls()
    }
}

/// Per-cycle scores of a twin experiment.
#[pyclass(name = "RunScores", frozen, get_all)]
struct PyRunScores {
    cycle: Vec<usize>,
    forecast_rmse: Vec<f64>,
    analysis_rmse: Vec<f64>,
    /// One list per cycle, lag 0 first.
    smoother_rmse: Vec<Vec<f64>>,
    spread: Vec<f64>,
    model_calls: Vec<u64>,
    iterations: Vec<usize>,
    diverged: bool,
    failure: Option<String>,
}

/// `dx/dt` of Lorenz-96.
#[pyfunction]
#[pyo3(signature = (x, forcing = 8.0))]
fn lorenz96_tendency(x: Vec<f64>, forcing: f64) -> PyResult<Vec<f64>> {
    Ok(dalab::dynamics::lorenz96_tendency(&vector(x), forcing).map_err(to_py)?.iter().copied().collect())
}

/// Kalman analysis of a Gaussian prior with a linear observation.
/// Returns `(mean, covariance)`.
#[pyfunction]
fn kf_analysis(
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    y: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let belief = GaussianBelief::new(vector(mean), spd(cov)?).map_err(to_py)?;
    let obs = ObservationModel::linear(matrix(h)?, spd(r)?).map_err(to_py)?;
    let forecast = KalmanState::new(belief, 0, BeliefKind::Forecast);
    let out = kf_update(&forecast, &obs, &vector(y)).map_err(to_py)?;
    Ok((out.belief.mean.iter().copied().collect(), rows(out.belief.cov.matrix())))
}

/// ETKF analysis of an ensemble (one member per column) observed through
/// `y = H x + noise`, `noise ~ N(0, R)`, after multiplicative inflation.
#[pyfunction]
#[pyo3(signature = (members, h, r, y, inflation = 1.0))]
fn etkf_analysis(
    members: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    y: Vec<f64>,
    inflation: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let forecast = EnsembleMatrix::new(matrix(members)?).map_err(to_py)?;
    let forecast = inflate(&forecast, inflation).map_err(to_py)?;
    let obs = ObservationModel::linear(matrix(h)?, spd(r)?).map_err(to_py)?;
    let pkg = etkf_transform(&forecast, &obs, &vector(y), None).map_err(to_py)?;
    Ok(rows(etkf_apply(&forecast, &pkg).map_err(to_py)?.members()))
}

#[pyfunction]
fn score_rmse(estimate: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    dalab::harness::score_rmse(&vector(estimate), &vector(truth)).map_err(to_py)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[pyfunction]
fn cholesky(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&spd(m)?.lower()))
}

/// Symmetric inverse square root of a symmetric positive-definite matrix.
#[pyfunction]
fn sym_inv_sqrt(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = linalg::sym_inv_sqrt(&spd(m)?).map_err(to_py)?;
    Ok(rows(out.matrix()))
}

/// Runs the twin experiment described by a TOML configuration string.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<PyRunScores> {
    let cfg = ExperimentConfig::from_toml_str(config).map_err(to_py)?;
    let result = py.detach(|| run_config(&cfg)).map_err(to_py)?;
    let s = &result.series;
    Ok(PyRunScores {
        cycle: s.rows.iter().map(|r| r.cycle).collect(),
        forecast_rmse: s.forecast_rmse(),
        analysis_rmse: s.analysis_rmse(),
        smoother_rmse: s.rows.iter().map(|r| r.smoother_rmse.clone()).collect(),
        spread: s.spread(),
        model_calls: s.model_calls(),
        iterations: s.iterations(),
        diverged: result.diverged(),
        failure: result.failure.as_ref().map(|e| e.to_string()),
    })
}

#[pymodule]
fn pydalab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyRunScores>()?;
    m.add_function(wrap_pyfunction!(lorenz96_tendency, m)?)?;
    m.add_function(wrap_pyfunction!(kf_analysis, m)?)?;
    m.add_function(wrap_pyfunction!(etkf_analysis, m)?)?;
    m.add_function(wrap_pyfunction!(score_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(cholesky, m)?)?;
    m.add_function(wrap_pyfunction!(sym_inv_sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
