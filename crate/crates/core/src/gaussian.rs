//! Gaussian beliefs, conditioning and ensemble statistics.

use nalgebra::linalg::Cholesky;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{symmetrise, SymPosDef};
use crate::rng::{self, standard_normal_vector, Rng};
use crate::{Matrix, Vector};

/// Mean and covariance of a Gaussian distribution.
#[derive(Clone, Debug)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub cov: SymPosDef,
}

impl GaussianBelief {
    pub fn new(mean: Vector, cov: SymPosDef) -> Result<Self> {
        check_dim(cov.dim(), mean.len())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Conditions `N(x̄, B)` on `y = Hx + ε`, `ε ~ N(0, R)`.
///
/// The innovation covariance `HBHᵀ + R` is factorised by Cholesky and
/// never inverted explicitly.
pub fn gaussian_condition(prior: &GaussianBelief, h: &Matrix, r: &SymPosDef, y: &Vector) -> Result<GaussianBelief> {
    let n = prior.dim();
    check_dim(n, h.ncols())?;
    check_dim(r.dim(), h.nrows())?;
    check_dim(r.dim(), y.len())?;
    let b = prior.cov.matrix();
    let bht = b * h.transpose();
    let s = symmetrise(&(h * &bht + r.matrix()));
    let chol = Cholesky::new(s).ok_or(Error::SingularInnovationCov)?;
    let innovation = y - h * &prior.mean;
    let mean = &prior.mean + &bht * chol.solve(&innovation);
    let gain_t = chol.solve(&bht.transpose());
    let cov = b - &bht * gain_t;
    let cov = match SymPosDef::from_symmetrised(cov) {
        Ok(c) => c,
        // Schur form lost definiteness to cancellation; use the precision form.
        Err(_) => {
            let precision = prior.cov.inverse() + h.transpose() * r.solve_matrix(h);
            let p = SymPosDef::from_symmetrised(precision)?;
            SymPosDef::from_symmetrised(p.inverse())?
        }
    };
    Ok(GaussianBelief { mean, cov })
}

/// `N_x × N_e` array of ensemble members.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMatrix {
    members: Matrix,
}

impl EnsembleMatrix {
    pub fn new(members: Matrix) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::EnsembleTooSmall(members.ncols()));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &Matrix {
        &self.members
    }

    pub fn into_members(self) -> Matrix {
        self.members
    }

    pub fn state_dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    /// `x̂ = E 1 / N_e`.
    pub fn mean(&self) -> Vector {
        ensemble_mean(&self.members)
    }

    /// `X = E (I − 11ᵀ/N_e)`.
    pub fn perturbations(&self) -> Matrix {
        centre(&self.members)
    }

    /// `P = X Xᵀ / (N_e − 1)`.
    pub fn covariance(&self) -> Matrix {
        let x = self.perturbations();
        symmetrise(&(&x * x.transpose())) / (self.size() as f64 - 1.0)
    }

    /// Root-mean-square of the per-component ensemble standard deviations.
    pub fn spread(&self) -> f64 {
        let x = self.perturbations();
        (x.norm_squared() / ((self.size() as f64 - 1.0) * self.state_dim() as f64)).sqrt()
    }
}

pub(crate) fn ensemble_mean(e: &Matrix) -> Vector {
    e.column_mean()
}

pub(crate) fn centre(e: &Matrix) -> Matrix {
    let mean = ensemble_mean(e);
    let mut x = e.clone();
    for mut col in x.column_iter_mut() {
        col -= &mean;
    }
    x
}

/// `(x̂, X, P)` of an ensemble.
pub fn ensemble_stats(e: &EnsembleMatrix) -> (Vector, Matrix, Matrix) {
    let mean = e.mean();
    let x = e.perturbations();
    let p = symmetrise(&(&x * x.transpose())) / (e.size() as f64 - 1.0);
    (mean, x, p)
}

/// `n` independent draws from `belief`, reproducible per `seed`.
pub fn sample_gaussian(belief: &GaussianBelief, n: usize, seed: u64) -> Result<EnsembleMatrix> {
    let mut rng = rng::stream(seed, rng::streams::INITIAL_CONDITION);
    sample_gaussian_with(belief, n, &mut rng)
}

/// As [`sample_gaussian`] with a caller-supplied generator.
pub fn sample_gaussian_with(belief: &GaussianBelief, n: usize, rng: &mut Rng) -> Result<EnsembleMatrix> {
    if n < 2 {
        return Err(Error::EnsembleTooSmall(n));
    }
    let l = belief.cov.lower();
    let cols: Vec<Vector> = (0..n).map(|_| &belief.mean + &l * standard_normal_vector(rng, belief.dim())).collect();
    EnsembleMatrix::new(Matrix::from_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::Rng as _;

    fn scalar(mean: f64, var: f64) -> GaussianBelief {
        GaussianBelief::new(Vector::from_element(1, mean), SymPosDef::scaled_identity(1, var)).unwrap()
    }

    #[test]
    fn scalar_equal_weights() {
        let h = Matrix::identity(1, 1);
        let post =
            gaussian_condition(&scalar(0.0, 1.0), &h, &SymPosDef::identity(1), &Vector::from_element(1, 1.0)).unwrap();
        assert!((post.mean[0] - 0.5).abs() < 1e-15);
        assert!((post.cov.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_observation() {
        let prior = GaussianBelief::new(
            Vector::from_vec(vec![1.0, -1.0]),
            SymPosDef::new(Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap(),
        )
        .unwrap();
        let h = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let post = gaussian_condition(&prior, &h, &SymPosDef::scaled_identity(1, 1e12), &Vector::from_element(1, 5.0))
            .unwrap();
        assert!((&post.mean - &prior.mean).amax() / prior.mean.amax() < 1e-10);
        assert!((post.cov.matrix() - prior.cov.matrix()).amax() / prior.cov.matrix().amax() < 1e-10);
    }

    #[test]
    fn joint_gaussian_oracle() {
        let mut rng = rng::stream(5, 0);
        let n = 4;
        let m = 2;
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = &a * a.transpose() + Matrix::identity(n, n);
        let h = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let r = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 2.0]));
        let mean = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let y = Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        // Stacked joint covariance of (x, y) and its Schur complement.
        let mut joint = Matrix::zeros(n + m, n + m);
        joint.view_mut((0, 0), (n, n)).copy_from(&b);
        joint.view_mut((0, n), (n, m)).copy_from(&(&b * h.transpose()));
        joint.view_mut((n, 0), (m, n)).copy_from(&(&h * &b));
        joint.view_mut((n, n), (m, m)).copy_from(&(&h * &b * h.transpose() + &r));
        let sxx = joint.view((0, 0), (n, n)).into_owned();
        let sxy = joint.view((0, n), (n, m)).into_owned();
        let syy_inv = joint.view((n, n), (m, m)).into_owned().try_inverse().unwrap();
        let oracle_mean = &mean + &sxy * &syy_inv * (&y - &h * &mean);
        let oracle_cov = &sxx - &sxy * &syy_inv * sxy.transpose();

        let prior = GaussianBelief::new(mean, SymPosDef::new(b).unwrap()).unwrap();
        let post = gaussian_condition(&prior, &h, &SymPosDef::new(r).unwrap(), &y).unwrap();
        assert!((post.mean - oracle_mean).amax() < 1e-12);
        assert!((post.cov.matrix() - oracle_cov).amax() < 1e-12);
    }

    #[test]
    fn posterior_is_inverse_hessian() {
        let b = Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
        let h = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
        let r = Matrix::from_diagonal(&Vector::from_vec(vec![0.3, 0.4]));
        let prior = GaussianBelief::new(Vector::zeros(3), SymPosDef::new(b.clone()).unwrap()).unwrap();
        let post = gaussian_condition(&prior, &h, &SymPosDef::new(r.clone()).unwrap(), &Vector::zeros(2)).unwrap();
        let hess = b.try_inverse().unwrap() + h.transpose() * r.try_inverse().unwrap() * &h;
        assert!((post.cov.matrix() - hess.try_inverse().unwrap()).amax() < 1e-10);
    }

    #[test]
    fn ensemble_identical_members() {
        let e = EnsembleMatrix::new(Matrix::from_element(3, 4, 2.5)).unwrap();
        let (mean, x, p) = ensemble_stats(&e);
        assert_eq!(mean, Vector::from_element(3, 2.5));
        assert_eq!(x, Matrix::zeros(3, 4));
        assert_eq!(p, Matrix::zeros(3, 3));
    }

    #[test]
    fn ensemble_two_members() {
        let a = Vector::from_vec(vec![1.0, 3.0]);
        let b = Vector::from_vec(vec![-1.0, 2.0]);
        let e = EnsembleMatrix::new(Matrix::from_columns(&[a.clone(), b.clone()])).unwrap();
        let (mean, _, p) = ensemble_stats(&e);
        assert_eq!(mean, (&a + &b) / 2.0);
        let d = &a - &b;
        assert!((p - &d * d.transpose() / 2.0).amax() < 1e-15);
    }

    #[test]
    fn ensemble_too_small() {
        assert_eq!(EnsembleMatrix::new(Matrix::zeros(3, 1)).unwrap_err(), Error::EnsembleTooSmall(1));
    }

    #[test]
    fn perturbations_sum_to_zero_and_rank_bounded() {
        let belief = GaussianBelief::new(Vector::zeros(8), SymPosDef::identity(8)).unwrap();
        let e = sample_gaussian(&belief, 4, 9).unwrap();
        let (_, x, p) = ensemble_stats(&e);
        assert!(x.column_sum().amax() < 1e-14);
        let mut eig: Vec<f64> = SymmetricEigen::new(p).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eig[..5].iter().all(|l| l.abs() < 1e-10));
    }

    #[test]
    fn sampling_mean_and_determinism() {
        let belief = GaussianBelief::new(Vector::zeros(3), SymPosDef::identity(3)).unwrap();
        let n = 100_000;
        let e = sample_gaussian(&belief, n, 42).unwrap();
        assert!(e.mean().amax() < 4.0 / (n as f64).sqrt());
        assert_eq!(e, sample_gaussian(&belief, n, 42).unwrap());
        assert_eq!(sample_gaussian(&belief, 2, 1).unwrap().size(), 2);
    }

    #[test]
    fn sample_covariance_converges_at_root_n() {
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.5]);
        let belief = GaussianBelief::new(Vector::zeros(2), SymPosDef::new(b.clone()).unwrap()).unwrap();
        let errs: Vec<f64> = [100usize, 1000, 10000]
            .iter()
            .map(|&n| {
                let reps = 40;
                (0..reps).map(|s| (sample_gaussian(&belief, n, s).unwrap().covariance() - &b).norm()).sum::<f64>()
                    / reps as f64
            })
            .collect();
        let slope = (errs[2].ln() - errs[0].ln()) / (10000f64.ln() - 100f64.ln());
        assert!((slope + 0.5).abs() < 0.15, "slope {slope}");
    }
}
