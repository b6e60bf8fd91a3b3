//! Maximum likelihood ensemble filter: Gauss-Newton in weight space with
//! the observation map linearised by ensemble finite differences.

use super::{check_rotation, whitened, SpectralSym, TransformPackage};
use crate::dynamics::ObservationModel;
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{centre, EnsembleMatrix};
use crate::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct MlefConfig {
    /// Bundle scale for the finite differences.
    pub epsilon: f64,
    pub weight_tol: f64,
    pub max_iter: usize,
}

impl Default for MlefConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, weight_tol: 1e-3, max_iter: 10 }
    }
}

impl MlefConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.weight_tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("MLEF epsilon, tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MlefOutcome {
    pub ensemble: EnsembleMatrix,
    pub package: TransformPackage,
    /// Iterations whose weight increment exceeded the tolerance.
    pub iterations: usize,
    /// False when `max_iter` was reached; the last iterate is still returned.
    pub converged: bool,
}

/// Observed mean and anomalies `(ŷ, Ỹ)` about `x` for perturbations `X`.
///
/// For nonlinear maps these are the ε-rescaled bundle differences
/// `ŷ = 𝓗(x1ᵀ + εX)1/N_e`, `Ỹ = 𝓗(x1ᵀ + εX)(I − 11ᵀ/N_e)/ε`. For linear
/// maps the difference quotient is exact, so the Jacobian product is used
/// directly and the result carries no ε-dependent rounding.
pub(crate) fn observed_bundle(
    obs: &ObservationModel,
    x: &Vector,
    perturbations: &Matrix,
    epsilon: f64,
) -> Result<(Vector, Matrix)> {
    if obs.is_linear() {
        return Ok((obs.apply(x)?, obs.jacobian_product(x, perturbations)?));
    }
    let mut bundle = perturbations * epsilon;
    for mut col in bundle.column_iter_mut() {
        col += x;
    }
    let hb = obs.apply_columns(&bundle)?;
    Ok((hb.column_mean(), centre(&hb) / epsilon))
}

/// Iterated ensemble analysis of `y`.
pub fn mlef_analysis(
    forecast: &EnsembleMatrix,
    obs: &ObservationModel,
    y: &Vector,
    cfg: &MlefConfig,
    rotation: Option<&Matrix>,
) -> Result<MlefOutcome> {
    cfg.validate()?;
    let n = forecast.size();
    check_dim(obs.state_dim(), forecast.state_dim())?;
    check_dim(obs.obs_dim(), y.len())?;
    check_rotation(rotation, n)?;
    let mean = forecast.mean();
    let x = forecast.perturbations();
    let mut w = Vector::zeros(n);
    let mut hessian: Option<SpectralSym> = None;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let state = &mean + &x * &w;
        let (y_hat, y_tilde) = observed_bundle(obs, &state, &x, cfg.epsilon)?;
        let (s, d) = whitened(obs, &y_tilde, &(y - y_hat));
        let xi = SpectralSym::shifted_gram(n as f64 - 1.0, &s)?;
        let gradient = &w * (n as f64 - 1.0) - s.tr_mul(&d);
        let dw = -xi.map(|l| 1.0 / l).apply_vec(&gradient);
        let step = dw.norm();
        w += dw;
        hessian = Some(xi);
        if step < cfg.weight_tol {
            converged = true;
            break;
        }
        iterations += 1;
    }
    let package = TransformPackage::from_hessian(w, hessian.expect("at least one iteration"), rotation.cloned());
    let ensemble = EnsembleMatrix::new(package.apply(forecast.members())?)?;
    Ok(MlefOutcome { ensemble, package, iterations, converged })
}
