//! Linear-Gaussian recursions: Kalman filter, extended Kalman filter and
//! the 4D Kalman smoother over a fixed-lag window.

use crate::dynamics::{DynamicalModel, Observation, ObservationModel};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{gaussian_condition, GaussianBelief};
use crate::linalg::{symmetrise, SymPosDef};
use crate::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeliefKind {
    Forecast,
    Analysis,
    Smoothed,
}

#[derive(Clone, Debug)]
pub struct KalmanState {
    pub belief: GaussianBelief,
    pub time_index: usize,
    pub kind: BeliefKind,
}

impl KalmanState {
    pub fn new(belief: GaussianBelief, time_index: usize, kind: BeliefKind) -> Self {
        Self { belief, time_index, kind }
    }
}

fn propagate_cov(m: &Matrix, b: &SymPosDef) -> Result<SymPosDef> {
    SymPosDef::from_symmetrised(m * b.matrix() * m.transpose())
}

/// `x̄ᶠ = M x̄ᵃ`, `Bᶠ = M Bᵃ Mᵀ`.
pub fn kf_forecast(analysis: &KalmanState, m: &Matrix) -> Result<KalmanState> {
    check_dim(analysis.belief.dim(), m.ncols())?;
    check_dim(m.ncols(), m.nrows())?;
    let mean = m * &analysis.belief.mean;
    let cov = propagate_cov(m, &analysis.belief.cov)?;
    Ok(KalmanState::new(GaussianBelief { mean, cov }, analysis.time_index + 1, BeliefKind::Forecast))
}

/// Kalman update with a linear observation operator.
pub fn kf_analysis(forecast: &KalmanState, obs: &ObservationModel, y: &Vector) -> Result<KalmanState> {
    if !obs.is_linear() {
        return Err(Error::NonlinearObservation);
    }
    let h = obs.jacobian(&forecast.belief.mean)?;
    let belief = gaussian_condition(&forecast.belief, &h, obs.cov(), y)?;
    Ok(KalmanState::new(belief, forecast.time_index, BeliefKind::Analysis))
}

/// Nonlinear mean forecast with covariance carried by the tangent-linear
/// resolvent about the analysis mean.
pub fn ekf_forecast(analysis: &KalmanState, model: &DynamicalModel) -> Result<KalmanState> {
    let (mean, lin) = model.linearise(&analysis.belief.mean)?;
    let cov = propagate_cov(&lin.resolvent(), &analysis.belief.cov)?;
    Ok(KalmanState::new(GaussianBelief { mean, cov }, analysis.time_index + 1, BeliefKind::Forecast))
}

/// Kalman update with `𝓗` linearised about the forecast mean.
pub fn ekf_analysis(forecast: &KalmanState, obs: &ObservationModel, y: &Vector) -> Result<KalmanState> {
    let x = &forecast.belief.mean;
    let h = obs.jacobian(x)?;
    // y − 𝓗(x̄) + H x̄ turns the linearised innovation into the linear form.
    let y_eff = y - obs.apply(x)? + &h * x;
    let belief = gaussian_condition(&forecast.belief, &h, obs.cov(), &y_eff)?;
    Ok(KalmanState::new(belief, forecast.time_index, BeliefKind::Analysis))
}

pub fn ekf_cycle(
    analysis: &KalmanState,
    model: &DynamicalModel,
    obs: &ObservationModel,
    y: &Vector,
) -> Result<KalmanState> {
    ekf_analysis(&ekf_forecast(analysis, model)?, obs, y)
}

/// Smoothed beliefs over a window `t_0..t_L`.
#[derive(Clone, Debug)]
pub struct SmootherWindow {
    pub start_index: usize,
    pub beliefs: Vec<GaussianBelief>,
}

impl SmootherWindow {
    pub fn lag(&self) -> usize {
        self.beliefs.len() - 1
    }

    pub fn at(&self, k: usize) -> &GaussianBelief {
        &self.beliefs[k]
    }
}

/// Exact minimiser of the quadratic 4D cost over a window.
///
/// `m_seq[k]` maps `t_k` to `t_{k+1}` and `obs_seq[k]` is the (optional)
/// observation at `t_{k+1}`. The posterior at `t_0` has covariance equal to
/// the inverse Hessian, and every later time is obtained by propagation.
pub fn ks_4d_solve(
    prior: &GaussianBelief,
    m_seq: &[Matrix],
    obs_seq: &[Option<Observation>],
) -> Result<Vec<GaussianBelief>> {
    let lag = m_seq.len();
    if lag == 0 {
        return Err(Error::Config("window must contain at least one step".into()));
    }
    check_dim(lag, obs_seq.len())?;
    let n = prior.dim();
    let mut hessian = prior.cov.inverse();
    let mut rhs = prior.cov.solve(&prior.mean);
    let mut resolvents = Vec::with_capacity(lag + 1);
    resolvents.push(Matrix::identity(n, n));
    for (m, obs) in m_seq.iter().zip(obs_seq) {
        check_dim(n, m.nrows())?;
        check_dim(n, m.ncols())?;
        let resolvent = m * resolvents.last().expect("non-empty");
        if let Some(obs) = obs {
            if !obs.operator.is_linear() {
                return Err(Error::NonlinearObservation);
            }
            let hm = obs.operator.jacobian(&Vector::zeros(n))? * &resolvent;
            let r = obs.operator.cov();
            hessian += hm.transpose() * r.solve_matrix(&hm);
            rhs += hm.transpose() * r.solve(&obs.y);
        }
        resolvents.push(resolvent);
    }
    let hessian = SymPosDef::from_symmetrised(hessian).map_err(|_| Error::SingularHessian)?;
    let mean0 = hessian.solve(&rhs);
    let cov0 = hessian.inverse();
    resolvents
        .iter()
        .map(|m| {
            let cov = SymPosDef::from_symmetrised(symmetrise(&(m * &cov0 * m.transpose())))?;
            Ok(GaussianBelief { mean: m * &mean0, cov })
        })
        .collect()
}

/// Next-cycle prior: the window's smoothed belief at `t_S`, re-indexed as
/// the new `t_0`.
pub fn ks_shift_cycle(window: &SmootherWindow, shift: usize) -> Result<KalmanState> {
    let lag = window.lag();
    if shift == 0 || shift > lag {
        return Err(Error::InvalidShift { shift, lag });
    }
    Ok(KalmanState::new(window.beliefs[shift].clone(), window.start_index + shift, BeliefKind::Smoothed))
}

/// Fixed-lag Kalman smoother driven by a stream of observations.
///
/// The first cycle assimilates all `L` observations of the initial window;
/// each later cycle assimilates the `S` observations newly entering it.
#[derive(Clone, Debug)]
pub struct FixedLagKs {
    pub lag: usize,
    pub shift: usize,
    prior: KalmanState,
    cycles: usize,
}

impl FixedLagKs {
    pub fn new(prior: KalmanState, lag: usize, shift: usize) -> Result<Self> {
        if shift == 0 || shift > lag {
            return Err(Error::InvalidShift { shift, lag });
        }
        Ok(Self { lag, shift, prior, cycles: 0 })
    }

    pub fn prior(&self) -> &KalmanState {
        &self.prior
    }

    /// Number of observations the next call to [`cycle`](Self::cycle) consumes.
    pub fn new_observations(&self) -> usize {
        if self.cycles == 0 {
            self.lag
        } else {
            self.shift
        }
    }

    /// Runs one cycle. `m_seq` covers the whole window and `new_obs` the
    /// observations at its last `new_observations()` times.
    pub fn cycle(&mut self, m_seq: &[Matrix], new_obs: &[Option<Observation>]) -> Result<SmootherWindow> {
        check_dim(self.lag, m_seq.len())?;
        check_dim(self.new_observations(), new_obs.len())?;
        let mut obs_seq = vec![None; self.lag - new_obs.len()];
        obs_seq.extend(new_obs.iter().cloned());
        let beliefs = ks_4d_solve(&self.prior.belief, m_seq, &obs_seq)?;
        let window = SmootherWindow { start_index: self.prior.time_index, beliefs };
        self.prior = ks_shift_cycle(&window, self.shift)?;
        self.cycles += 1;
        Ok(window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn belief2() -> GaussianBelief {
        GaussianBelief::new(
            Vector::from_vec(vec![1.0, -0.5]),
            SymPosDef::new(Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap(),
        )
        .unwrap()
    }

    fn state(b: GaussianBelief) -> KalmanState {
        KalmanState::new(b, 0, BeliefKind::Analysis)
    }

    #[test]
    fn forecast_identity_and_scaling() {
        let s = state(belief2());
        let f = kf_forecast(&s, &Matrix::identity(2, 2)).unwrap();
        assert_eq!(f.belief.mean, s.belief.mean);
        assert_eq!(f.belief.cov.matrix(), s.belief.cov.matrix());
        assert_eq!(f.time_index, 1);
        let f = kf_forecast(&s, &(Matrix::identity(2, 2) * 2.0)).unwrap();
        assert_eq!(f.belief.mean, &s.belief.mean * 2.0);
        assert!((f.belief.cov.matrix() - s.belief.cov.matrix() * 4.0).amax() < 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let s = state(belief2());
        let obs = ObservationModel::linear(Matrix::from_row_slice(1, 2, &[1.0, 1.0]), SymPosDef::identity(1)).unwrap();
        let y = obs.apply(&s.belief.mean).unwrap();
        let a = kf_analysis(&s, &obs, &y).unwrap();
        assert!((&a.belief.mean - &s.belief.mean).amax() < 1e-15);
        assert!(a.belief.cov.matrix().trace() < s.belief.cov.matrix().trace());
    }

    #[test]
    fn kf_analysis_rejects_nonlinear() {
        let obs = ObservationModel::elementwise(2, vec![0], crate::dynamics::ElementwiseKind::Square, 1.0).unwrap();
        let err = kf_analysis(&state(belief2()), &obs, &Vector::zeros(1)).unwrap_err();
        assert_eq!(err, Error::NonlinearObservation);
    }

    #[test]
    fn ekf_matches_kf_on_linear_model() {
        let a = Matrix::from_row_slice(2, 2, &[-0.2, 1.0, -1.0, -0.1]);
        let model = DynamicalModel::linear(a, 0.01, 0.05).unwrap();
        let obs = ObservationModel::identity(2, 0.5).unwrap();
        let y = Vector::from_vec(vec![0.3, 0.1]);
        let s = state(belief2());
        let ekf = ekf_cycle(&s, &model, &obs, &y).unwrap();
        let (_, lin) = model.linearise(&Vector::zeros(2)).unwrap();
        let kf = kf_analysis(&kf_forecast(&s, &lin.resolvent()).unwrap(), &obs, &y).unwrap();
        assert!((ekf.belief.mean - kf.belief.mean).amax() < 1e-12);
        assert!((ekf.belief.cov.matrix() - kf.belief.cov.matrix()).amax() < 1e-12);
    }

    #[test]
    fn confident_prior_ignores_observation() {
        let model = DynamicalModel::lorenz96(6, 8.0).unwrap();
        let x = Vector::from_fn(6, |i, _| i as f64);
        let s = state(GaussianBelief::new(x.clone(), SymPosDef::scaled_identity(6, 1e-12)).unwrap());
        let obs = ObservationModel::identity(6, 1.0).unwrap();
        let a = ekf_cycle(&s, &model, &obs, &Vector::zeros(6)).unwrap();
        let fc = model.forecast(&x, 1).unwrap();
        assert!((a.belief.mean - fc).amax() < 1e-8);
    }

    fn linear_setup() -> (Vec<Matrix>, Arc<ObservationModel>) {
        let m = Matrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 1.05]);
        let obs = Arc::new(
            ObservationModel::linear(Matrix::from_row_slice(1, 2, &[1.0, 0.5]), SymPosDef::scaled_identity(1, 0.3))
                .unwrap(),
        );
        (vec![m; 6], obs)
    }

    #[test]
    fn one_step_window_is_the_filter() {
        let (ms, obs) = linear_setup();
        let y = Vector::from_element(1, 0.7);
        let window =
            ks_4d_solve(&belief2(), &ms[..1], &[Some(Observation::new(obs.clone(), y.clone()).unwrap())]).unwrap();
        let kf = kf_analysis(&kf_forecast(&state(belief2()), &ms[0]).unwrap(), &obs, &y).unwrap();
        assert!((&window[1].mean - kf.belief.mean).amax() < 1e-12);
        assert!((window[1].cov.matrix() - kf.belief.cov.matrix()).amax() < 1e-12);
    }

    #[test]
    fn perfect_observation_pins_state() {
        let obs = Arc::new(ObservationModel::identity(2, 1e-12).unwrap());
        let y = Vector::from_vec(vec![3.0, -2.0]);
        let window =
            ks_4d_solve(&belief2(), &[Matrix::identity(2, 2)], &[Some(Observation::new(obs, y.clone()).unwrap())])
                .unwrap();
        assert!((&window[1].mean - y).amax() < 1e-5);
    }

    #[test]
    fn shift_validation_and_identity_dynamics() {
        let obs = Arc::new(ObservationModel::identity(2, 1.0).unwrap());
        let ms = vec![Matrix::identity(2, 2); 3];
        let window = SmootherWindow {
            start_index: 0,
            beliefs: ks_4d_solve(
                &belief2(),
                &ms,
                &[None, None, Some(Observation::new(obs, Vector::zeros(2)).unwrap())],
            )
            .unwrap(),
        };
        assert_eq!(ks_shift_cycle(&window, 4).unwrap_err(), Error::InvalidShift { shift: 4, lag: 3 });
        assert!(ks_shift_cycle(&window, 0).is_err());
        let next = ks_shift_cycle(&window, 2).unwrap();
        assert_eq!(next.time_index, 2);
        // Identity dynamics: every time in the window carries the same belief.
        assert!((&next.belief.mean - &window.beliefs[0].mean).amax() < 1e-14);
        assert!((next.belief.cov.matrix() - window.beliefs[0].cov.matrix()).amax() < 1e-14);
    }

    #[test]
    fn fixed_lag_filter_marginals_match_kf() {
        let (ms, obs) = linear_setup();
        let truth_obs: Vec<Vector> = (0..24).map(|k| Vector::from_element(1, (k as f64 * 0.37).sin())).collect();
        // Plain KF filter marginals at t_1..t_24.
        let mut kf = state(belief2());
        let mut filter = Vec::new();
        for y in &truth_obs {
            kf = kf_analysis(&kf_forecast(&kf, &ms[0]).unwrap(), &obs, y).unwrap();
            filter.push(kf.belief.clone());
        }
        for (lag, shift) in [(1, 1), (3, 1), (3, 3), (4, 2)] {
            let mut ks = FixedLagKs::new(state(belief2()), lag, shift).unwrap();
            let mut next = 0;
            while next + ks.new_observations() <= truth_obs.len() {
                let count = ks.new_observations();
                let new: Vec<_> = truth_obs[next..next + count]
                    .iter()
                    .map(|y| Some(Observation::new(obs.clone(), y.clone()).unwrap()))
                    .collect();
                let window = ks.cycle(&ms[..lag], &new).unwrap();
                next += count;
                let last = window.at(lag);
                assert!((&last.mean - &filter[next - 1].mean).amax() < 1e-8, "L={lag} S={shift}");
                assert!((last.cov.matrix() - filter[next - 1].cov.matrix()).amax() < 1e-8);
            }
        }
    }
}
