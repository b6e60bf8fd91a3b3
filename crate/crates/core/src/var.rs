//! Variational MAP solvers: incremental 3D-VAR and 4D-VAR in weight space,
//! with a matrix-free conjugate-gradient inner loop.
//!
//! States are parametrised as `x = x̄ + Σ w` with `B = Σ Σᵀ`. Each outer
//! Gauss-Newton iteration linearises about the current total weight and
//! solves the resulting quadratic for the increment `w̄` exactly by CG.

use crate::dynamics::{DynamicalModel, IntervalLinearisation, Observation, ObservationModel, StateVector, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::GaussianBelief;
use crate::linalg::{cholesky_factor, TallFactor};
use crate::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct VarConfig {
    pub max_outer_iter: usize,
    /// Outer loop stops once the increment norm `‖w̄‖` falls below this.
    pub weight_tol: f64,
    pub cg_tol: f64,
    /// Defaults to `10 · N_w` when unset.
    pub cg_max_iter: Option<usize>,
}

impl Default for VarConfig {
    fn default() -> Self {
        Self { max_outer_iter: 20, weight_tol: 1e-3, cg_tol: 1e-8, cg_max_iter: None }
    }
}

impl VarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iter == 0 || !(self.weight_tol > 0.0) || !(self.cg_tol > 0.0) || self.cg_max_iter == Some(0) {
            return Err(Error::Config("variational tolerances and iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// Solves `A x = b` for symmetric positive-definite `A` given only its action.
///
/// Returns the solution and the number of iterations. Fails with
/// `CgStalled` if the relative residual does not reach `cg_tol` within the
/// iteration cap or a non-positive curvature direction appears.
pub fn cg_solve<F>(mut apply: F, rhs: &Vector, cfg: &VarConfig) -> Result<(Vector, usize)>
where
    F: FnMut(&Vector) -> Vector,
{
    let n = rhs.len();
    let max_iter = cfg.cg_max_iter.unwrap_or(10 * n.max(1));
    let b_norm = rhs.norm();
    let mut x = Vector::zeros(n);
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    for it in 1..=max_iter {
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return Err(Error::CgStalled { iterations: it, residual: rr.sqrt() / b_norm });
        }
        let alpha = rr / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.norm_squared();
        if rr_new.sqrt() < cfg.cg_tol * b_norm {
            return Ok((x, it));
        }
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    Err(Error::CgStalled { iterations: max_iter, residual: rr.sqrt() / b_norm })
}

/// `Σ` with `B = ΣΣᵀ`.
#[derive(Clone, Debug)]
pub struct BackgroundFactor {
    pub factor: TallFactor,
}

impl BackgroundFactor {
    pub fn new(factor: TallFactor) -> Self {
        Self { factor }
    }

    /// Cholesky factor of the belief covariance.
    pub fn from_belief(belief: &GaussianBelief) -> Self {
        Self { factor: cholesky_factor(&belief.cov) }
    }

    pub fn matrix(&self) -> &Matrix {
        self.factor.matrix()
    }

    pub fn weight_dim(&self) -> usize {
        self.factor.cols()
    }
}

/// Result of an outer Gauss-Newton loop.
#[derive(Clone, Debug)]
pub struct VarOutcome {
    /// Optimal state at the start of the window (the analysis for 3D-VAR).
    pub initial: Vector,
    /// Total weight `w` with `initial = x̄ + Σ w`.
    pub weight: Vector,
    /// Outer iterations whose increment exceeded `weight_tol`.
    pub iterations: usize,
    /// `‖w̄ⁱ‖` of every increment computed, including the final small one.
    pub increment_norms: Vec<f64>,
    /// Cost at the starting point and after every increment.
    pub cost_history: Vec<f64>,
    pub converged: bool,
}

impl VarOutcome {
    /// Turns a non-converged outcome into `MaxIterationsExceeded`.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxIterationsExceeded(self.iterations))
        }
    }
}

/// Incremental 3D-VAR analysis for a single observation.
pub fn threedvar_solve(
    background_mean: &Vector,
    sigma: &BackgroundFactor,
    obs: &ObservationModel,
    y: &Vector,
    cfg: &VarConfig,
) -> Result<VarOutcome> {
    cfg.validate()?;
    let s = sigma.matrix();
    check_dim(background_mean.len(), s.nrows())?;
    check_dim(obs.obs_dim(), y.len())?;
    let r = obs.cov();
    let cost = |w: &Vector| -> Result<f64> {
        let x = background_mean + s * w;
        Ok(0.5 * w.norm_squared() + 0.5 * r.quad_form(&(y - obs.apply(&x)?)))
    };
    let mut w = Vector::zeros(s.ncols());
    let mut outcome = VarOutcome {
        initial: background_mean.clone(),
        weight: w.clone(),
        iterations: 0,
        increment_norms: Vec::new(),
        cost_history: vec![cost(&w)?],
        converged: false,
    };
    for _ in 0..cfg.max_outer_iter {
        let x = background_mean + s * &w;
        let hs = obs.jacobian_product(&x, s)?;
        let innovation = y - obs.apply(&x)?;
        let rhs = hs.tr_mul(&r.solve(&innovation)) - &w;
        let rinv_hs = r.solve_matrix(&hs);
        let (dw, _) = cg_solve(|v| v + hs.tr_mul(&(&rinv_hs * v)), &rhs, cfg)?;
        let step = dw.norm();
        w += dw;
        outcome.increment_norms.push(step);
        outcome.cost_history.push(cost(&w)?);
        if step < cfg.weight_tol {
            outcome.converged = true;
            break;
        }
        outcome.iterations += 1;
    }
    outcome.initial = background_mean + s * &w;
    outcome.weight = w;
    Ok(outcome)
}

/// Per-window quantities of the adjoint gradient computation.
#[derive(Clone, Debug, Default)]
pub struct AdjointWorkspace {
    /// `δ̄_k = y_k − 𝓗_k(x_k)` along the nonlinear reference.
    pub innovations: Vec<Option<Vector>>,
    /// `Δ_k = R_k⁻¹(δ̄_k − H_k M_{k:1} Σ w̄)`.
    pub residuals: Vec<Option<Vector>>,
    /// `δ̃_k` for `k = 0..L`.
    pub adjoints: Vec<Vector>,
}

/// Nonlinear reference trajectory with its tangent-linear maps.
struct Reference {
    states: Vec<Vector>,
    lins: Vec<IntervalLinearisation>,
}

/// Strong-constraint 4D cost over a window `t_0..t_L` in weight space:
/// `𝒥(w) = ½‖w‖² + ½ Σ_k ‖y_k − 𝓗_k(𝓜_{k:0}(x̄ + Σw))‖²_{R_k}`.
#[derive(Clone, Debug)]
pub struct FourDVar<'a> {
    model: &'a DynamicalModel,
    prior_mean: Vector,
    sigma: Matrix,
    window: &'a [Option<Observation>],
}

impl<'a> FourDVar<'a> {
    /// `window[k]` is the observation at `t_{k+1}`.
    pub fn new(
        model: &'a DynamicalModel,
        prior_mean: Vector,
        sigma: &BackgroundFactor,
        window: &'a [Option<Observation>],
    ) -> Result<Self> {
        check_dim(model.state_dim(), prior_mean.len())?;
        check_dim(model.state_dim(), sigma.matrix().nrows())?;
        if window.is_empty() {
            return Err(Error::Config("4D-VAR window must contain at least one step".into()));
        }
        for obs in window.iter().flatten() {
            check_dim(model.state_dim(), obs.operator.state_dim())?;
        }
        Ok(Self { model, prior_mean, sigma: sigma.matrix().clone(), window })
    }

    pub fn from_belief(
        model: &'a DynamicalModel,
        prior: &GaussianBelief,
        window: &'a [Option<Observation>],
    ) -> Result<Self> {
        Self::new(model, prior.mean.clone(), &BackgroundFactor::from_belief(prior), window)
    }

    pub fn lag(&self) -> usize {
        self.window.len()
    }

    pub fn weight_dim(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn state_of(&self, w: &Vector) -> Vector {
        &self.prior_mean + &self.sigma * w
    }

    fn reference(&self, w: &Vector) -> Result<Reference> {
        let mut states = Vec::with_capacity(self.lag() + 1);
        let mut lins = Vec::with_capacity(self.lag());
        states.push(self.state_of(w));
        for _ in 0..self.lag() {
            let (next, lin) = self.model.linearise(states.last().expect("non-empty"))?;
            states.push(next);
            lins.push(lin);
        }
        Ok(Reference { states, lins })
    }

    fn innovations(&self, reference: &Reference) -> Result<Vec<Option<Vector>>> {
        self.window
            .iter()
            .enumerate()
            .map(|(k, obs)| obs.as_ref().map(|o| Ok(&o.y - o.operator.apply(&reference.states[k + 1])?)).transpose())
            .collect()
    }

    /// `H_k M_{k:1} δx_0` for every observed time.
    fn tlm_sweep(&self, reference: &Reference, dx0: &Vector) -> Result<Vec<Option<Vector>>> {
        let mut dx = dx0.clone();
        let mut out = Vec::with_capacity(self.lag());
        for (k, obs) in self.window.iter().enumerate() {
            dx = reference.lins[k].apply(&dx);
            out.push(match obs {
                Some(o) => Some(o.operator.jacobian_action(&reference.states[k + 1], &dx)?),
                None => None,
            });
        }
        Ok(out)
    }

    /// Reverse sweep `δ̃_k = H_kᵀ Δ_k + M_{k+1}ᵀ δ̃_{k+1}`, returning all `δ̃_k`.
    fn adjoint_sweep(&self, reference: &Reference, residuals: &[Option<Vector>]) -> Result<Vec<Vector>> {
        let n = self.model.state_dim();
        let lag = self.lag();
        let mut adjoints = vec![Vector::zeros(n); lag + 1];
        let mut lam = Vector::zeros(n);
        for k in (1..=lag).rev() {
            if let (Some(obs), Some(delta)) = (&self.window[k - 1], &residuals[k - 1]) {
                lam += obs.operator.jacobian_transpose_action(&reference.states[k], delta)?;
            }
            adjoints[k] = lam.clone();
            lam = reference.lins[k - 1].apply_transpose(&lam);
        }
        adjoints[0] = lam;
        Ok(adjoints)
    }

    pub fn cost(&self, w: &Vector) -> Result<f64> {
        check_dim(self.weight_dim(), w.len())?;
        let mut x = self.state_of(w);
        let mut total = 0.5 * w.norm_squared();
        for obs in self.window {
            x = self.model.forecast(&x, 1)?;
            if let Some(o) = obs {
                total += 0.5 * o.operator.cov().quad_form(&(&o.y - o.operator.apply(&x)?));
            }
        }
        Ok(total)
    }

    /// Adjoint gradient `∇𝒥(w) = w − Σᵀ δ̃_0`.
    pub fn gradient(&self, w: &Vector) -> Result<Vector> {
        Ok(self.incremental_gradient(w, &Vector::zeros(w.len()))?.0)
    }

    /// Gradient of the incremental quadratic cost linearised about `w_ref`,
    /// evaluated at the increment `dw`, together with the workspace of the
    /// three passes. With `dw = 0` this is the full gradient at `w_ref`.
    pub fn incremental_gradient(&self, w_ref: &Vector, dw: &Vector) -> Result<(Vector, AdjointWorkspace)> {
        check_dim(self.weight_dim(), w_ref.len())?;
        check_dim(self.weight_dim(), dw.len())?;
        let reference = self.reference(w_ref)?;
        let innovations = self.innovations(&reference)?;
        let increments = self.tlm_sweep(&reference, &(&self.sigma * dw))?;
        let residuals: Vec<Option<Vector>> = self
            .window
            .iter()
            .zip(innovations.iter().zip(&increments))
            .map(|(obs, (d, hmx))| match (obs, d, hmx) {
                (Some(o), Some(d), Some(hmx)) => Some(o.operator.cov().solve(&(d - hmx))),
                _ => None,
            })
            .collect();
        let adjoints = self.adjoint_sweep(&reference, &residuals)?;
        let grad = w_ref + dw - self.sigma.tr_mul(&adjoints[0]);
        Ok((grad, AdjointWorkspace { innovations, residuals, adjoints }))
    }

    /// Gauss-Newton Hessian action `v + Σᵀ Σ_k M_kᵀ H_kᵀ R_k⁻¹ H_k M_k Σ v`.
    fn hessian_action(&self, reference: &Reference, v: &Vector) -> Result<Vector> {
        let hmx = self.tlm_sweep(reference, &(&self.sigma * v))?;
        let weighted: Vec<Option<Vector>> = self
            .window
            .iter()
            .zip(hmx)
            .map(|(obs, h)| match (obs, h) {
                (Some(o), Some(h)) => Some(o.operator.cov().solve(&h)),
                _ => None,
            })
            .collect();
        let adjoints = self.adjoint_sweep(reference, &weighted)?;
        Ok(v + self.sigma.tr_mul(&adjoints[0]))
    }

    /// Outer Gauss-Newton loop; each inner quadratic is solved by CG using
    /// tangent-linear and adjoint products only.
    pub fn solve(&self, cfg: &VarConfig) -> Result<FourDVarOutcome> {
        cfg.validate()?;
        let mut w = Vector::zeros(self.weight_dim());
        let mut var = VarOutcome {
            initial: self.prior_mean.clone(),
            weight: w.clone(),
            iterations: 0,
            increment_norms: Vec::new(),
            cost_history: vec![self.cost(&w)?],
            converged: false,
        };
        for _ in 0..cfg.max_outer_iter {
            let reference = self.reference(&w)?;
            let innovations = self.innovations(&reference)?;
            let residuals: Vec<Option<Vector>> = self
                .window
                .iter()
                .zip(&innovations)
                .map(|(obs, d)| match (obs, d) {
                    (Some(o), Some(d)) => Some(o.operator.cov().solve(d)),
                    _ => None,
                })
                .collect();
            let adjoints = self.adjoint_sweep(&reference, &residuals)?;
            let rhs = self.sigma.tr_mul(&adjoints[0]) - &w;
            let mut failure = None;
            let (dw, _) = cg_solve(
                |v| match self.hessian_action(&reference, v) {
                    Ok(hv) => hv,
                    Err(e) => {
                        failure.get_or_insert(e);
                        v.clone()
                    }
                },
                &rhs,
                cfg,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            let step = dw.norm();
            w += dw;
            var.increment_norms.push(step);
            var.cost_history.push(self.cost(&w)?);
            if step < cfg.weight_tol {
                var.converged = true;
                break;
            }
            var.iterations += 1;
        }
        var.initial = self.state_of(&w);
        var.weight = w;
        let gradient_norm = self.gradient(&var.weight)?.norm();
        let trajectory = self.model.trajectory(&StateVector::new(var.initial.clone(), 0)?, self.lag())?;
        Ok(FourDVarOutcome { outcome: var, trajectory, gradient_norm })
    }
}

#[derive(Clone, Debug)]
pub struct FourDVarOutcome {
    pub outcome: VarOutcome,
    /// `𝓜_{k:0}(x̄_0)` for `k = 0..L`, indexed from 0.
    pub trajectory: Trajectory,
    /// `‖∇𝒥‖` at the returned weight.
    pub gradient_norm: f64,
}

/// Adjoint gradient of the 4D cost at `x0 = x̄ + Σ w`.
pub fn fourdvar_gradient(
    model: &DynamicalModel,
    prior_mean: &Vector,
    sigma: &BackgroundFactor,
    window: &[Option<Observation>],
    w: &Vector,
) -> Result<Vector> {
    FourDVar::new(model, prior_mean.clone(), sigma, window)?.gradient(w)
}

pub fn fourdvar_solve(
    model: &DynamicalModel,
    prior_mean: &Vector,
    sigma: &BackgroundFactor,
    window: &[Option<Observation>],
    cfg: &VarConfig,
) -> Result<FourDVarOutcome> {
    FourDVar::new(model, prior_mean.clone(), sigma, window)?.solve(cfg)
}
