//! Deterministic ensemble filters in ensemble (weight) space.
//!
//! An analysis is a right transform `Eᵃ = Eᶠ Ψ` with
//! `Ψ = 11ᵀ/N_e + (I − 11ᵀ/N_e)(ŵ1ᵀ + √(N_e−1) T U)`, where `ŵ` minimises
//! the ensemble cost, `T = Ξ^{-1/2}` is the symmetric inverse root of its
//! Hessian and `U` is a mean-preserving rotation (identity by default).

mod mlef;
mod spectral;

use rand::Rng as _;

pub use mlef::{mlef_analysis, MlefConfig, MlefOutcome};
pub use spectral::SpectralSym;

use crate::dynamics::ObservationModel;
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{centre, ensemble_mean, EnsembleMatrix};
use crate::rng;
use crate::{Matrix, Vector};

/// ETKF analysis products for one observation time.
#[derive(Clone, Debug)]
pub struct TransformPackage {
    /// Optimal weights `ŵ`.
    pub weights: Vector,
    /// `Ξ = (N_e − 1) I + Yᵀ R⁻¹ Y`.
    pub hessian: SpectralSym,
    /// `T = Ξ^{-1/2}`.
    pub transform: SpectralSym,
    /// `U`, with `None` meaning the identity.
    pub rotation: Option<Matrix>,
}

impl TransformPackage {
    /// The package that leaves any ensemble unchanged: `ŵ = 0`, `T = I/√(N_e−1)`.
    pub fn identity(n_e: usize) -> Self {
        let floor = n_e as f64 - 1.0;
        let hessian = SpectralSym::shifted_gram(floor, &Matrix::zeros(0, n_e)).expect("empty gram");
        let transform = hessian.map(|l| 1.0 / l.sqrt());
        Self { weights: Vector::zeros(n_e), hessian, transform, rotation: None }
    }

    pub(crate) fn from_hessian(weights: Vector, hessian: SpectralSym, rotation: Option<Matrix>) -> Self {
        let transform = hessian.map(|l| 1.0 / l.sqrt());
        Self { weights, hessian, transform, rotation }
    }

    pub fn ensemble_size(&self) -> usize {
        self.weights.len()
    }

    /// `√(N_e − 1) T U`.
    fn scaled_transform(&self) -> Matrix {
        let n = self.ensemble_size();
        let t = self.transform.to_dense() * (n as f64 - 1.0).sqrt();
        match &self.rotation {
            Some(u) => t * u,
            None => t,
        }
    }

    /// Dense right transform `Ψ`.
    pub fn right_transform(&self) -> Matrix {
        let n = self.ensemble_size();
        let ones = Matrix::from_element(n, n, 1.0 / n as f64);
        let inner = &self.weights * Vector::from_element(n, 1.0).transpose() + self.scaled_transform();
        &ones + (Matrix::identity(n, n) - &ones) * inner
    }

    /// `E Ψ` for any ensemble with `N_e` columns (current or lagged).
    ///
    /// Evaluated as `x̂1ᵀ + X(ŵ1ᵀ + √(N_e−1) T U)`, which needs only the
    /// low-rank form of `T`.
    pub fn apply(&self, e: &Matrix) -> Result<Matrix> {
        let n = self.ensemble_size();
        check_dim(n, e.ncols())?;
        let mean = ensemble_mean(e);
        let x = centre(e);
        let shift = &mean + &x * &self.weights;
        let mut xt = self.transform.right_multiply(&x) * (n as f64 - 1.0).sqrt();
        if let Some(u) = &self.rotation {
            xt *= u;
        }
        for mut col in xt.column_iter_mut() {
            col += &shift;
        }
        Ok(xt)
    }
}

/// Whitened anomalies `S = R^{-1/2} Y` and innovation `R^{-1/2} d`.
pub(crate) fn whitened(obs: &ObservationModel, y_anomalies: &Matrix, innovation: &Vector) -> (Matrix, Vector) {
    let r = obs.cov();
    (r.whiten_matrix(y_anomalies), r.whiten(innovation))
}

/// Weights and Hessian of the quadratic ensemble cost
/// `½(N_e−1)‖w‖² + ½‖d − Y w‖²_R` with `Y = R^{1/2} S`.
pub(crate) fn solve_weights(n_e: usize, s: &Matrix, d: &Vector) -> Result<(Vector, SpectralSym)> {
    let hessian = SpectralSym::shifted_gram(n_e as f64 - 1.0, s)?;
    let w = hessian.map(|l| 1.0 / l).apply_vec(&s.tr_mul(d));
    Ok((w, hessian))
}

fn check_rotation(rotation: Option<&Matrix>, n: usize) -> Result<()> {
    if let Some(u) = rotation {
        check_dim(n, u.nrows())?;
        check_dim(n, u.ncols())?;
    }
    Ok(())
}

/// ETKF transform for `y` given a forecast ensemble.
///
/// Observed anomalies are `Y = H(x̂ᶠ) Xᶠ` and the innovation is
/// `y − 𝓗(x̂ᶠ)`; both are exact for linear operators.
pub fn etkf_transform(
    forecast: &EnsembleMatrix,
    obs: &ObservationModel,
    y: &Vector,
    rotation: Option<&Matrix>,
) -> Result<TransformPackage> {
    let n = forecast.size();
    check_dim(obs.state_dim(), forecast.state_dim())?;
    check_dim(obs.obs_dim(), y.len())?;
    check_rotation(rotation, n)?;
    let mean = forecast.mean();
    let x = forecast.perturbations();
    let y_anom = obs.jacobian_product(&mean, &x)?;
    let innovation = y - obs.apply(&mean)?;
    let (s, d) = whitened(obs, &y_anom, &innovation);
    let (w, hessian) = solve_weights(n, &s, &d)?;
    Ok(TransformPackage::from_hessian(w, hessian, rotation.cloned()))
}

/// `Eᵃ = Eᶠ Ψ`.
pub fn etkf_analysis(forecast: &EnsembleMatrix, pkg: &TransformPackage) -> Result<EnsembleMatrix> {
    EnsembleMatrix::new(pkg.apply(forecast.members())?)
}

/// Which filter transform an ensemble scheme uses at each observation.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterKind {
    /// Single Newton step with `H` linearised at the forecast mean.
    Etkf,
    /// Iterated analysis with bundle finite differences.
    Mlef(MlefConfig),
}

/// Filter analysis of `y`; returns the analysis ensemble, its transform
/// and the number of iterations counted by the filter.
pub fn filter_analysis(
    kind: &FilterKind,
    forecast: &EnsembleMatrix,
    obs: &ObservationModel,
    y: &Vector,
    rotation: Option<&Matrix>,
) -> Result<(EnsembleMatrix, TransformPackage, usize)> {
    match kind {
        FilterKind::Etkf => {
            let pkg = etkf_transform(forecast, obs, y, rotation)?;
            Ok((etkf_analysis(forecast, &pkg)?, pkg, 1))
        }
        FilterKind::Mlef(cfg) => {
            let out = mlef_analysis(forecast, obs, y, cfg, rotation)?;
            Ok((out.ensemble, out.package, out.iterations))
        }
    }
}

/// Per-analysis source of rotations: the identity, or a fresh seeded
/// random mean-preserving rotation for every analysis.
#[derive(Clone, Debug)]
pub struct RotationSource {
    seed: Option<u64>,
    drawn: u64,
}

impl RotationSource {
    pub fn identity() -> Self {
        Self { seed: None, drawn: 0 }
    }

    pub fn random(seed: u64) -> Self {
        Self { seed: Some(seed), drawn: 0 }
    }

    pub fn next(&mut self, n: usize) -> Result<Option<Matrix>> {
        match self.seed {
            None => Ok(None),
            Some(seed) => {
                self.drawn += 1;
                let stream_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.drawn);
                random_mean_preserving_rotation(n, stream_seed).map(Some)
            }
        }
    }
}

/// Multiplicative inflation of the perturbations about a fixed mean.
pub fn inflate(e: &EnsembleMatrix, lambda: f64) -> Result<EnsembleMatrix> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidFactor(lambda));
    }
    if lambda == 1.0 {
        return Ok(e.clone());
    }
    let mean = e.mean();
    let mut out = e.perturbations() * lambda;
    for mut col in out.column_iter_mut() {
        col += &mean;
    }
    EnsembleMatrix::new(out)
}

/// Random orthogonal `U` with `U 1 = 1`, seeded.
///
/// A Householder reflection maps `e_1` to `1/√n`; a Haar-distributed
/// orthogonal block acts on the complement of `span{1}`.
pub fn random_mean_preserving_rotation(n: usize, seed: u64) -> Result<Matrix> {
    if n < 2 {
        return Err(Error::EnsembleTooSmall(n));
    }
    let mut rng = rng::stream(seed, rng::streams::ROTATION);
    let m = n - 1;
    let g = Matrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // Sign correction makes the QR factor Haar distributed.
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut block = Matrix::identity(n, n);
    block.view_mut((1, 1), (m, m)).copy_from(&q);
    let u = Vector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut v = -u;
    v[0] += 1.0;
    let householder = Matrix::identity(n, n) - &v * v.transpose() * (2.0 / v.norm_squared());
    Ok(&householder * block * &householder)
}
