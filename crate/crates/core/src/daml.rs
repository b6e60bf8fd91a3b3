//! Joint estimation of a state trajectory and a polynomial surrogate of
//! the dynamics by coordinate descent on the DA-ML cost
//!
//! `J(A, x_{0:L}) = Σ_k ½‖y_k − 𝓗(x_k)‖²_{R_k} + ½log|R_k|
//!                + Σ_k ½‖x_k − F_A(x_{k−1})‖²_{Q_k} + ½log|Q_k| − log p(x_0, A, Q)`.
//!
//! The observation window follows the variational convention: `obs[k]` is
//! the observation at `t_{k+1}`, so a window of `L` observations pairs
//! with a trajectory `x_0..x_L`.
//!
//! The surrogate is `F_A(x) = A φ(x)` with polynomial features `φ`. Other
//! parametric families (for example neural networks) would implement the
//! same `apply`, `state_jacobian` and feature-regression interface. The
//! marginal over `x` (expectation-maximisation) is not implemented.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Observation, StateVector, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::GaussianBelief;
use crate::linalg::{symmetrise, SymPosDef};
use crate::{Matrix, Vector};

/// Polynomial feature family of the surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    /// `φ(x) = x`
    Linear,
    /// `φ(x) = (1, x)`
    Affine,
    /// `φ(x) = (1, x, x_i x_j for i ≤ j)`
    Quadratic,
}

impl FeatureSet {
    pub fn count(self, n: usize) -> usize {
        match self {
            FeatureSet::Linear => n,
            FeatureSet::Affine => n + 1,
            FeatureSet::Quadratic => 1 + n + n * (n + 1) / 2,
        }
    }

    fn has_constant(self) -> bool {
        !matches!(self, FeatureSet::Linear)
    }

    /// Feature names in evaluation order: `1`, `x3`, `x1*x4`.
    pub fn names(self, n: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(self.count(n));
        if self.has_constant() {
            names.push("1".to_string());
        }
        names.extend((0..n).map(|i| format!("x{i}")));
        if self == FeatureSet::Quadratic {
            for i in 0..n {
                for j in i..n {
                    names.push(format!("x{i}*x{j}"));
                }
            }
        }
        names
    }

    /// `φ(x)`.
    pub fn evaluate(self, x: &Vector) -> Vector {
        let n = x.len();
        let mut phi = Vec::with_capacity(self.count(n));
        if self.has_constant() {
            phi.push(1.0);
        }
        phi.extend(x.iter().copied());
        if self == FeatureSet::Quadratic {
            for i in 0..n {
                for j in i..n {
                    phi.push(x[i] * x[j]);
                }
            }
        }
        Vector::from_vec(phi)
    }

    /// `∂φ/∂x`, of shape features × state.
    pub fn jacobian(self, x: &Vector) -> Matrix {
        let n = x.len();
        let mut jac = Matrix::zeros(self.count(n), n);
        let offset = usize::from(self.has_constant());
        for i in 0..n {
            jac[(offset + i, i)] = 1.0;
        }
        if self == FeatureSet::Quadratic {
            let mut row = offset + n;
            for i in 0..n {
                for j in i..n {
                    jac[(row, i)] += x[j];
                    jac[(row, j)] += x[i];
                    row += 1;
                }
            }
        }
        jac
    }
}

/// Surrogate resolvent `F_A(x) = A φ(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    features: FeatureSet,
    coefficients: Matrix,
}

impl SurrogateModel {
    pub fn new(features: FeatureSet, coefficients: Matrix) -> Result<Self> {
        let n = coefficients.nrows();
        if n == 0 {
            return Err(Error::DimensionTooSmall(0));
        }
        check_dim(features.count(n), coefficients.ncols())?;
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        Ok(Self { features, coefficients })
    }

    /// All-zero coefficients.
    pub fn zeros(features: FeatureSet, state_dim: usize) -> Result<Self> {
        Self::new(features, Matrix::zeros(state_dim, features.count(state_dim)))
    }

    /// The persistence model `F(x) = x`.
    pub fn persistence(features: FeatureSet, state_dim: usize) -> Result<Self> {
        let mut a = Matrix::zeros(state_dim, features.count(state_dim));
        let offset = usize::from(features.has_constant());
        for i in 0..state_dim {
            a[(i, offset + i)] = 1.0;
        }
        Self::new(features, a)
    }

    pub fn features(&self) -> FeatureSet {
        self.features
    }

    pub fn state_dim(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn coefficients(&self) -> &Matrix {
        &self.coefficients
    }

    /// Linear part of the surrogate, the dynamics matrix when the features
    /// are linear.
    pub fn linear_block(&self) -> Matrix {
        let offset = usize::from(self.features.has_constant());
        self.coefficients.columns(offset, self.state_dim()).into_owned()
    }

    /// `F_A(x)`.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.state_dim(), x.len())?;
        Ok(&self.coefficients * self.features.evaluate(x))
    }

    /// `∂F_A/∂x` at `x`.
    pub fn state_jacobian(&self, x: &Vector) -> Result<Matrix> {
        check_dim(self.state_dim(), x.len())?;
        Ok(&self.coefficients * self.features.jacobian(x))
    }

    /// `(∂F_A/∂A) δA = δA φ(x)`.
    pub fn parameter_action(&self, x: &Vector, delta: &Matrix) -> Result<Vector> {
        check_dim(self.state_dim(), x.len())?;
        check_dim(self.coefficients.nrows(), delta.nrows())?;
        check_dim(self.coefficients.ncols(), delta.ncols())?;
        Ok(delta * self.features.evaluate(x))
    }

    /// Plain-text coefficient table: one section per output component,
    /// mapping feature name to coefficient.
    pub fn to_toml_string(&self) -> Result<String> {
        let names = self.features.names(self.state_dim());
        let coefficients = (0..self.state_dim())
            .map(|i| {
                let row = names.iter().enumerate().map(|(j, name)| (name.clone(), self.coefficients[(i, j)])).collect();
                (format!("x{i}"), row)
            })
            .collect();
        let file = SurrogateFile { state_dim: self.state_dim(), features: self.features, coefficients };
        toml::to_string(&file).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SurrogateFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let n = file.state_dim;
        let names = file.features.names(n);
        let mut a = Matrix::zeros(n, names.len());
        if file.coefficients.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: file.coefficients.len() });
        }
        for i in 0..n {
            let row = file
                .coefficients
                .get(&format!("x{i}"))
                .ok_or_else(|| Error::Config(format!("missing coefficients for x{i}")))?;
            if row.len() != names.len() {
                return Err(Error::DimensionMismatch { expected: names.len(), found: row.len() });
            }
            for (j, name) in names.iter().enumerate() {
                a[(i, j)] = *row.get(name).ok_or_else(|| Error::Config(format!("missing feature {name} for x{i}")))?;
            }
        }
        Self::new(file.features, a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SurrogateFile {
    state_dim: usize,
    features: FeatureSet,
    coefficients: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Model-error covariances `Q_1..Q_L`. Observation covariances come with
/// each observation operator.
#[derive(Clone, Debug)]
pub struct ErrorStatistics {
    pub q: Vec<SymPosDef>,
}

impl ErrorStatistics {
    /// `Q_k = q I` for every step.
    pub fn scalar(state_dim: usize, lag: usize, q: f64) -> Result<Self> {
        if !(q > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { q: vec![SymPosDef::scaled_identity(state_dim, q); lag] })
    }

    pub fn lag(&self) -> usize {
        self.q.len()
    }
}

/// `−log p(x_0, A, Q)` up to a constant. `A` is always flat and `Q` fixed.
#[derive(Clone, Debug)]
pub enum Hyperprior {
    Flat,
    /// `x_0 ~ N(x_b, B)`, contributing `½‖x_0 − x_b‖²_B + ½log|B|`.
    GaussianInitial(GaussianBelief),
}

/// The DA-ML cost split into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DamlCostTerms {
    pub observation_misfit: f64,
    pub observation_log_det: f64,
    pub model_misfit: f64,
    pub model_log_det: f64,
    pub prior_misfit: f64,
    pub prior_log_det: f64,
}

impl DamlCostTerms {
    /// Sum of the quadratic terms only.
    pub fn misfit(&self) -> f64 {
        self.observation_misfit + self.model_misfit + self.prior_misfit
    }

    /// Sum of the log-determinant terms, constant while the covariances are fixed.
    pub fn log_dets(&self) -> f64 {
        self.observation_log_det + self.model_log_det + self.prior_log_det
    }

    pub fn total(&self) -> f64 {
        self.misfit() + self.log_dets()
    }
}

fn check_problem(
    a: &SurrogateModel,
    states: &[Vector],
    stats: &ErrorStatistics,
    obs: &[Option<Observation>],
) -> Result<()> {
    let lag = obs.len();
    if lag == 0 {
        return Err(Error::WindowUnderflow);
    }
    check_dim(lag + 1, states.len())?;
    check_dim(lag, stats.lag())?;
    let n = a.state_dim();
    for x in states {
        check_dim(n, x.len())?;
    }
    for q in &stats.q {
        check_dim(n, q.dim())?;
    }
    for o in obs.iter().flatten() {
        check_dim(n, o.operator.state_dim())?;
    }
    Ok(())
}

fn states_of(trajectory: &Trajectory) -> Vec<Vector> {
    trajectory.states.iter().map(|s| s.values.clone()).collect()
}

/// Every term of the DA-ML cost.
pub fn daml_cost_terms(
    a: &SurrogateModel,
    trajectory: &Trajectory,
    stats: &ErrorStatistics,
    obs: &[Option<Observation>],
    hyperprior: &Hyperprior,
) -> Result<DamlCostTerms> {
    let states = states_of(trajectory);
    check_problem(a, &states, stats, obs)?;
    let mut terms = DamlCostTerms::default();
    for (k, o) in obs.iter().enumerate() {
        let x = &states[k + 1];
        if let Some(o) = o {
            let r = &o.y - o.operator.apply(x)?;
            terms.observation_misfit += 0.5 * o.operator.cov().quad_form(&r);
            terms.observation_log_det += 0.5 * o.operator.cov().log_det();
        }
        let q = &stats.q[k];
        let e = x - a.apply(&states[k])?;
        terms.model_misfit += 0.5 * q.quad_form(&e);
        terms.model_log_det += 0.5 * q.log_det();
    }
    if let Hyperprior::GaussianInitial(b) = hyperprior {
        check_dim(a.state_dim(), b.dim())?;
        terms.prior_misfit = 0.5 * b.cov.quad_form(&(&states[0] - &b.mean));
        terms.prior_log_det = 0.5 * b.cov.log_det();
    }
    Ok(terms)
}

/// Total DA-ML cost.
pub fn daml_cost(
    a: &SurrogateModel,
    trajectory: &Trajectory,
    stats: &ErrorStatistics,
    obs: &[Option<Observation>],
    hyperprior: &Hyperprior,
) -> Result<f64> {
    Ok(daml_cost_terms(a, trajectory, stats, obs, hyperprior)?.total())
}

/// The pure learning cost `Σ_k ½‖y_k − F_A(y_{k−1})‖²_{Q_k}` on a
/// fully observed sequence `y_0..y_L`.
pub fn ml_cost(a: &SurrogateModel, data: &[Vector], stats: &ErrorStatistics) -> Result<f64> {
    check_dim(stats.lag() + 1, data.len())?;
    let mut cost = 0.0;
    for k in 1..data.len() {
        cost += 0.5 * stats.q[k - 1].quad_form(&(&data[k] - a.apply(&data[k - 1])?));
    }
    Ok(cost)
}

/// Gauss-Newton settings of the state (DA) step.
#[derive(Clone, Debug, PartialEq)]
pub struct DaStepConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for DaStepConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-5, max_iter: 50 }
    }
}

/// Contributions of one model step: `GᵀQ⁻¹G`, `−Q⁻¹G`, `Q⁻¹e`, `−GᵀQ⁻¹e`
/// and the observation term `(HᵀR⁻¹H, −HᵀR⁻¹r)` when observed.
type StepBlocks = (Matrix, Matrix, Vector, Vector, Option<(Matrix, Vector)>);

/// Block-tridiagonal Gauss-Newton system in the trajectory.
struct BlockSystem {
    diag: Vec<Matrix>,
    upper: Vec<Matrix>,
    grad: Vec<Vector>,
}

impl BlockSystem {
    fn assemble(
        a: &SurrogateModel,
        states: &[Vector],
        stats: &ErrorStatistics,
        obs: &[Option<Observation>],
        hyperprior: &Hyperprior,
    ) -> Result<Self> {
        let n = a.state_dim();
        let lag = obs.len();
        let mut diag = vec![Matrix::zeros(n, n); lag + 1];
        let mut upper = vec![Matrix::zeros(n, n); lag];
        let mut grad = vec![Vector::zeros(n); lag + 1];
        let blocks: Vec<Result<StepBlocks>> = (0..lag)
            .into_par_iter()
            .map(|k| {
                let q = &stats.q[k];
                let g = a.state_jacobian(&states[k])?;
                let e = &states[k + 1] - a.apply(&states[k])?;
                let qinv_g = q.solve_matrix(&g);
                let qinv_e = q.solve(&e);
                let obs_block = match &obs[k] {
                    Some(o) => {
                        let x = &states[k + 1];
                        let h = o.operator.jacobian(x)?;
                        let r = &o.y - o.operator.apply(x)?;
                        let rinv_h = o.operator.cov().solve_matrix(&h);
                        Some((h.tr_mul(&rinv_h), -rinv_h.tr_mul(&r)))
                    }
                    None => None,
                };
                Ok((g.tr_mul(&qinv_g), -qinv_g.transpose(), qinv_e.clone(), -g.tr_mul(&qinv_e), obs_block))
            })
            .collect();
        for (k, block) in blocks.into_iter().enumerate() {
            let (gqg, coupling, qe, gqe, obs_block) = block?;
            let q = &stats.q[k];
            diag[k] += gqg;
            diag[k + 1] += q.inverse();
            upper[k] = coupling;
            grad[k + 1] += qe;
            grad[k] += gqe;
            if let Some((hrh, hr)) = obs_block {
                diag[k + 1] += hrh;
                grad[k + 1] += hr;
            }
        }
        if let Hyperprior::GaussianInitial(b) = hyperprior {
            check_dim(n, b.dim())?;
            diag[0] += b.cov.inverse();
            grad[0] += b.cov.solve(&(&states[0] - &b.mean));
        }
        for d in diag.iter_mut() {
            *d = symmetrise(d);
        }
        Ok(Self { diag, upper, grad })
    }

    fn gradient_norm(&self) -> f64 {
        self.grad.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    /// Solves `H δ = −g`, by block Cholesky when `H` is definite and by a
    /// minimum-norm dense solve otherwise.
    fn newton_step(&self) -> Result<Vec<Vector>> {
        match self.block_cholesky_solve() {
            Some(step) => Ok(step),
            None => self.dense_min_norm_solve(),
        }
    }

    fn block_cholesky_solve(&self) -> Option<Vec<Vector>> {
        let m = self.diag.len();
        let mut factors: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(m);
        let mut couplings: Vec<Matrix> = Vec::with_capacity(m - 1);
        let mut d = self.diag[0].clone();
        for k in 0..m {
            let chol = nalgebra::Cholesky::new(d.clone())?;
            if k + 1 < m {
                let mut w = self.upper[k].clone();
                chol.l().solve_lower_triangular_mut(&mut w);
                d = &self.diag[k + 1] - w.tr_mul(&w);
                couplings.push(w);
            }
            factors.push(chol);
        }
        // Forward: L z = −g.
        let mut z: Vec<Vector> = Vec::with_capacity(m);
        for k in 0..m {
            let mut rhs = -&self.grad[k];
            if k > 0 {
                rhs -= couplings[k - 1].tr_mul(&z[k - 1]);
            }
            let l = factors[k].l();
            z.push(l.solve_lower_triangular(&rhs)?);
        }
        // Backward: Lᵀ δ = z.
        let mut delta = vec![Vector::zeros(0); m];
        for k in (0..m).rev() {
            let mut rhs = z[k].clone();
            if k + 1 < m {
                rhs -= &couplings[k] * &delta[k + 1];
            }
            let l = factors[k].l();
            delta[k] = l.tr_solve_lower_triangular(&rhs)?;
        }
        Some(delta)
    }

    fn dense_min_norm_solve(&self) -> Result<Vec<Vector>> {
        let m = self.diag.len();
        let n = self.diag[0].nrows();
        let mut h = Matrix::zeros(m * n, m * n);
        let mut g = Vector::zeros(m * n);
        for k in 0..m {
            h.view_mut((k * n, k * n), (n, n)).copy_from(&self.diag[k]);
            g.rows_mut(k * n, n).copy_from(&self.grad[k]);
            if k + 1 < m {
                h.view_mut((k * n, (k + 1) * n), (n, n)).copy_from(&self.upper[k]);
                h.view_mut(((k + 1) * n, k * n), (n, n)).copy_from(&self.upper[k].transpose());
            }
        }
        let step = -min_norm_solve(&h, &g)?;
        Ok((0..m).map(|k| step.rows(k * n, n).into_owned()).collect())
    }
}

/// Minimum-norm solution of `G a = b` for symmetric positive semidefinite `G`.
fn min_norm_solve(g: &Matrix, b: &Vector) -> Result<Vector> {
    let eig = nalgebra::SymmetricEigen::new(symmetrise(g));
    let scale = eig.eigenvalues.amax();
    if !scale.is_finite() {
        return Err(Error::NonFiniteState);
    }
    let tol = scale * g.nrows() as f64 * f64::EPSILON;
    let coeffs = eig.eigenvectors.tr_mul(b);
    let scaled = Vector::from_fn(coeffs.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > tol {
            coeffs[i] / l
        } else {
            0.0
        }
    });
    Ok(&eig.eigenvectors * scaled)
}

/// Minimises the DA-ML cost over `x_{0:L}` with `A` frozen
/// (weak-constraint Gauss-Newton with backtracking).
///
/// Stops once the gradient norm is below `grad_tol`, or once the predicted
/// decrease of a Newton step falls below the rounding of the cost.
pub fn da_step(
    a: &SurrogateModel,
    initial: &Trajectory,
    obs: &[Option<Observation>],
    stats: &ErrorStatistics,
    hyperprior: &Hyperprior,
    cfg: &DaStepConfig,
) -> Result<Trajectory> {
    let start = initial.first().map(|s| s.time_index).unwrap_or(0);
    let mut states = states_of(initial);
    check_problem(a, &states, stats, obs)?;
    let cost_of = |states: &[Vector]| -> Result<f64> {
        let traj = Trajectory::from_vectors(start, states.to_vec())?;
        daml_cost(a, &traj, stats, obs, hyperprior)
    };
    let mut cost = cost_of(&states)?;
    for _ in 0..cfg.max_iter {
        let system = BlockSystem::assemble(a, &states, stats, obs, hyperprior)?;
        if system.gradient_norm() < cfg.grad_tol {
            return Trajectory::from_vectors(start, states);
        }
        let step = system.newton_step()?;
        let slope: f64 = step.iter().zip(&system.grad).map(|(d, g)| d.dot(g)).sum();
        if -slope <= 4.0 * f64::EPSILON * cost.abs().max(1.0) {
            // The predicted decrease is below the rounding of the cost:
            // stationary to working precision even if `grad_tol` is not met
            // in absolute terms (very small Q or R).
            return Trajectory::from_vectors(start, states);
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<Vector> = states.iter().zip(&step).map(|(x, d)| x + d * alpha).collect();
            if let Ok(c) = cost_of(&trial) {
                if c <= cost + 1e-4 * alpha * slope {
                    states = trial;
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let system = BlockSystem::assemble(a, &states, stats, obs, hyperprior)?;
    if system.gradient_norm() < cfg.grad_tol {
        Trajectory::from_vectors(start, states)
    } else {
        Err(Error::MaxIterationsExceeded(cfg.max_iter))
    }
}

/// Feature matrix `Φ` (features × L) of `x_0..x_{L−1}` and targets `X`
/// (state × L) of `x_1..x_L`.
fn regression_data(features: FeatureSet, states: &[Vector]) -> (Matrix, Matrix) {
    let phis: Vec<Vector> = states[..states.len() - 1].par_iter().map(|x| features.evaluate(x)).collect();
    (Matrix::from_columns(&phis), Matrix::from_columns(&states[1..]))
}

/// Minimises `Σ_k ½‖x_k − A φ(x_{k−1})‖²_{Q_k}` over `A` exactly.
///
/// With a common `Q` the weighting drops out and `A` solves the ordinary
/// normal equations `A ΦΦᵀ = XΦᵀ`; otherwise the Kronecker-weighted normal
/// equations are solved. Singular normal matrices yield the minimum-norm
/// minimiser. Fewer pairs than features is rejected as `RankDeficient`.
pub fn ml_step(features: FeatureSet, trajectory: &Trajectory, stats: &ErrorStatistics) -> Result<SurrogateModel> {
    let states = states_of(trajectory);
    let pairs = states.len().saturating_sub(1);
    check_dim(pairs, stats.lag())?;
    let n = states[0].len();
    let p = features.count(n);
    if pairs < p {
        return Err(Error::RankDeficient);
    }
    let (phi, targets) = regression_data(features, &states);
    let common_q = stats.q.windows(2).all(|w| w[0].matrix() == w[1].matrix());
    let a = if common_q {
        let gram = symmetrise(&(&phi * phi.transpose()));
        let rhs = &targets * phi.transpose();
        let mut a = Matrix::zeros(n, p);
        match nalgebra::Cholesky::new(gram.clone()) {
            Some(chol) => a.copy_from(&chol.solve(&rhs.transpose()).transpose()),
            None => {
                for i in 0..n {
                    let row = min_norm_solve(&gram, &rhs.row(i).transpose())?;
                    a.row_mut(i).copy_from(&row.transpose());
                }
            }
        }
        a
    } else {
        // vec(A) column-major: Σ_k (φ_k φ_kᵀ ⊗ Q_k⁻¹) vec(A) = Σ_k vec(Q_k⁻¹ x_k φ_kᵀ).
        let mut lhs = Matrix::zeros(n * p, n * p);
        let mut rhs = Matrix::zeros(n, p);
        for k in 0..pairs {
            let qinv = stats.q[k].inverse();
            let phik = phi.column(k);
            rhs += &qinv * targets.column(k) * phik.transpose();
            lhs += (phik * phik.transpose()).kronecker(&qinv);
        }
        let vec_a = min_norm_solve(&lhs, &Vector::from_column_slice(rhs.as_slice()))?;
        Matrix::from_column_slice(n, p, vec_a.as_slice())
    };
    SurrogateModel::new(features, a)
}

/// Outer loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub outer_iters: usize,
    /// Stop once the relative cost change falls below this.
    pub rel_tol: f64,
    pub da: DaStepConfig,
    /// Replace every `Q_k` by the mean residual outer product after each
    /// outer iteration. A heuristic; the cost is then no longer monotone.
    pub adaptive_q: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { outer_iters: 20, rel_tol: 1e-8, da: DaStepConfig::default(), adaptive_q: false }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub surrogate: SurrogateModel,
    pub trajectory: Trajectory,
    pub stats: ErrorStatistics,
    /// Cost before training and after every outer iteration.
    pub cost_history: Vec<f64>,
    /// Cost after every half step (DA then ML), for monotonicity checks.
    pub substep_costs: Vec<f64>,
    pub outer_iterations: usize,
}

/// Alternates [`da_step`] and [`ml_step`] until the relative cost change
/// drops below `rel_tol` or `outer_iters` is reached.
///
/// The change is measured on the quadratic terms; the log-determinants are
/// constant for fixed covariances and would otherwise swamp it.
pub fn coordinate_descent_train(
    obs: &[Option<Observation>],
    init: &SurrogateModel,
    init_trajectory: &Trajectory,
    stats: &ErrorStatistics,
    hyperprior: &Hyperprior,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.outer_iters == 0 {
        return Err(Error::Config("outer_iters must be at least 1".into()));
    }
    let mut a = init.clone();
    let mut traj = init_trajectory.clone();
    let mut stats = stats.clone();
    let terms = daml_cost_terms(&a, &traj, &stats, obs, hyperprior)?;
    let mut misfit = terms.misfit();
    let mut cost_history = vec![terms.total()];
    let mut substep_costs = vec![terms.total()];
    let mut outer_iterations = 0;
    for _ in 0..cfg.outer_iters {
        traj = da_step(&a, &traj, obs, &stats, hyperprior, &cfg.da)?;
        substep_costs.push(daml_cost(&a, &traj, &stats, obs, hyperprior)?);
        a = ml_step(a.features(), &traj, &stats)?;
        if cfg.adaptive_q {
            stats = adapt_q(&a, &traj)?;
        }
        let terms = daml_cost_terms(&a, &traj, &stats, obs, hyperprior)?;
        substep_costs.push(terms.total());
        cost_history.push(terms.total());
        outer_iterations += 1;
        let change = (misfit - terms.misfit()).abs();
        let settled = change <= cfg.rel_tol * misfit.abs() || change <= 1e-14 * (1.0 + terms.total().abs());
        misfit = terms.misfit();
        if settled {
            break;
        }
    }
    Ok(TrainOutcome { surrogate: a, trajectory: traj, stats, cost_history, substep_costs, outer_iterations })
}

/// `Q = mean_k e_k e_kᵀ` with `e_k = x_k − F_A(x_{k−1})`, floored to stay
/// definite.
fn adapt_q(a: &SurrogateModel, traj: &Trajectory) -> Result<ErrorStatistics> {
    let states = states_of(traj);
    let lag = states.len() - 1;
    let n = a.state_dim();
    let mut q = Matrix::zeros(n, n);
    for k in 1..=lag {
        let e = &states[k] - a.apply(&states[k - 1])?;
        q += &e * e.transpose();
    }
    q /= lag as f64;
    let floor = 1e-8 * (1.0 + q.trace() / n as f64);
    q += Matrix::identity(n, n) * floor;
    Ok(ErrorStatistics { q: vec![SymPosDef::from_symmetrised(q)?; lag] })
}

/// Trajectory initialised from the observations where `𝓗` is the identity,
/// and from the previous state elsewhere.
pub fn trajectory_from_observations(x0: &Vector, obs: &[Option<Observation>]) -> Result<Trajectory> {
    let mut states = vec![x0.clone()];
    for o in obs {
        let prev = states.last().expect("non-empty").clone();
        let next = match o {
            Some(o) if o.operator.is_linear() && o.operator.obs_dim() == o.operator.state_dim() => o.y.clone(),
            _ => prev,
        };
        states.push(next);
    }
    Trajectory::new(states.into_iter().enumerate().map(|(k, v)| StateVector::new(v, k)).collect::<Result<_>>()?)
}
