//! Fixed-lag ensemble smoothers over a data assimilation window (DAW) of
//! lag `L` and shift `S`.
//!
//! All three schemes keep a [`LaggedEnsembleStore`] covering `t_0..t_L`
//! at the end of a cycle. [`shift_daw`] then drops the `S` oldest entries,
//! so between cycles the store covers `t_0..t_{L−S}` of the next window and
//! a cycle adds exactly `S` new times. The first cycle starts from a store
//! holding only the initial ensemble and assimilates all `L` observations.

use std::collections::VecDeque;

use crate::dynamics::{DynamicalModel, Observation};
use crate::ensemble::whitened;
use crate::ensemble::{
    filter_analysis, inflate, FilterKind, MlefConfig, RotationSource, SpectralSym, TransformPackage,
};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{centre, EnsembleMatrix};
use crate::{Matrix, Vector};

/// Window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DAWConfig {
    pub lag: usize,
    pub shift: usize,
}

impl DAWConfig {
    pub fn new(lag: usize, shift: usize) -> Result<Self> {
        if lag == 0 || shift == 0 || shift > lag {
            return Err(Error::InvalidShift { shift, lag });
        }
        Ok(Self { lag, shift })
    }
}

/// Ensembles for consecutive time indices starting at `start_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedEnsembleStore {
    start_index: usize,
    ensembles: VecDeque<EnsembleMatrix>,
}

impl LaggedEnsembleStore {
    pub fn new(initial: EnsembleMatrix, time_index: usize) -> Self {
        Self { start_index: time_index, ensembles: VecDeque::from([initial]) }
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    /// Time index of the newest entry.
    pub fn end_index(&self) -> usize {
        self.start_index + self.ensembles.len() - 1
    }

    pub fn len(&self) -> usize {
        self.ensembles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensembles.is_empty()
    }

    pub fn ensemble_size(&self) -> usize {
        self.front().size()
    }

    pub fn get(&self, time_index: usize) -> Option<&EnsembleMatrix> {
        time_index.checked_sub(self.start_index).and_then(|k| self.ensembles.get(k))
    }

    pub fn front(&self) -> &EnsembleMatrix {
        self.ensembles.front().expect("store is never empty")
    }

    pub fn back(&self) -> &EnsembleMatrix {
        self.ensembles.back().expect("store is never empty")
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnsembleMatrix> {
        self.ensembles.iter()
    }

    /// Appends the ensemble for time `end_index() + 1`.
    pub fn push(&mut self, e: EnsembleMatrix) -> Result<()> {
        check_dim(self.ensemble_size(), e.size())?;
        check_dim(self.front().state_dim(), e.state_dim())?;
        self.ensembles.push_back(e);
        Ok(())
    }

    /// Right-multiplies every stored ensemble by the transform.
    fn transform_all(&mut self, pkg: &TransformPackage) -> Result<()> {
        for e in self.ensembles.iter_mut() {
            *e = EnsembleMatrix::new(pkg.apply(e.members())?)?;
        }
        Ok(())
    }
}

/// Drops the `shift` oldest ensembles and re-indexes the store so that the
/// oldest retained entry becomes the new `t_0`.
pub fn shift_daw(store: &mut LaggedEnsembleStore, shift: usize) -> Result<()> {
    if shift == 0 || shift >= store.len() {
        return Err(Error::InvalidShift { shift, lag: store.len().saturating_sub(1) });
    }
    store.ensembles.drain(..shift);
    store.start_index += shift;
    Ok(())
}

/// Settings shared by the ensemble smoothers.
#[derive(Clone, Debug, PartialEq)]
pub struct SmootherConfig {
    pub daw: DAWConfig,
    /// Filter transform used by EnKS and SIEnKS.
    pub filter: FilterKind,
    /// Multiplicative inflation applied to the ensemble that starts each forecast.
    pub inflation: f64,
    /// Bundle scale, tolerance and iteration cap of the IEnKS.
    pub bundle: MlefConfig,
}

impl SmootherConfig {
    pub fn new(daw: DAWConfig) -> Self {
        Self { daw, filter: FilterKind::Etkf, inflation: 1.0, bundle: MlefConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        DAWConfig::new(self.daw.lag, self.daw.shift)?;
        if !(self.inflation >= 1.0) || !self.inflation.is_finite() {
            return Err(Error::InvalidFactor(self.inflation));
        }
        if let FilterKind::Mlef(cfg) = &self.filter {
            cfg.validate()?;
        }
        self.bundle.validate()
    }
}

/// What one smoother cycle produced.
#[derive(Clone, Debug)]
pub struct CycleReport {
    /// Time index of `t_0` of the window just processed.
    pub start_index: usize,
    /// Smoothed ensembles for `t_0..t_L` given every observation up to `t_L`.
    pub window: Vec<EnsembleMatrix>,
    /// Forecast mean at `t_L` before its observation was assimilated.
    pub forecast_mean: Vector,
    /// Filter or Gauss-Newton iterations summed over the cycle.
    pub iterations: usize,
    /// Single-state RK4 steps taken during the cycle.
    pub model_calls: u64,
}

impl CycleReport {
    /// Smoothed ensemble at lag `ℓ` behind the window end.
    pub fn lagged(&self, lag: usize) -> Option<&EnsembleMatrix> {
        self.window.len().checked_sub(lag + 1).map(|k| &self.window[k])
    }
}

fn check_window(store: &LaggedEnsembleStore, new_obs: &[Option<Observation>], daw: &DAWConfig) -> Result<()> {
    if new_obs.is_empty() || store.len() + new_obs.len() != daw.lag + 1 {
        return Err(Error::WindowUnderflow);
    }
    Ok(())
}

/// One EnKS cycle over the new observations `new_obs` (times
/// `end_index()+1 ..`).
///
/// Each observation is assimilated by the filter in time order; its
/// transform is applied to the filter ensemble and retrospectively to every
/// lagged ensemble already in the store. Leaves the store at `t_0..t_L`;
/// call [`shift_daw`] before the next cycle.
pub fn enks_cycle(
    store: &mut LaggedEnsembleStore,
    model: &DynamicalModel,
    new_obs: &[Option<Observation>],
    cfg: &SmootherConfig,
    rotations: &mut RotationSource,
) -> Result<CycleReport> {
    cfg.validate()?;
    check_window(store, new_obs, &cfg.daw)?;
    let calls = model.model_calls();
    let mut iterations = 0;
    let mut forecast_mean = store.back().mean();
    for obs in new_obs {
        let start = inflate(store.back(), cfg.inflation)?;
        let forecast = EnsembleMatrix::new(model.forecast_columns(start.members(), 1)?)?;
        forecast_mean = forecast.mean();
        match obs {
            None => store.push(forecast)?,
            Some(obs) => {
                let rotation = rotations.next(forecast.size())?;
                let (analysis, pkg, its) =
                    filter_analysis(&cfg.filter, &forecast, &obs.operator, &obs.y, rotation.as_ref())?;
                iterations += its;
                store.transform_all(&pkg)?;
                store.push(analysis)?;
            }
        }
    }
    Ok(CycleReport {
        start_index: store.start_index,
        window: store.iter().cloned().collect(),
        forecast_mean,
        iterations,
        model_calls: model.model_calls() - calls,
    })
}

/// One SIEnKS cycle.
///
/// A single ensemble sweep runs over the whole window from the (inflated)
/// smoothed `t_0` ensemble. At each new observation time the filter
/// transform updates the swept ensemble and is applied retrospectively to
/// every earlier ensemble of the sweep, including `t_0`. The smoothed
/// ensemble stored at `t_S` is the next cycle's initial ensemble, so each
/// cycle costs exactly one sweep of `L` intervals.
pub fn sienks_cycle(
    store: &mut LaggedEnsembleStore,
    model: &DynamicalModel,
    new_obs: &[Option<Observation>],
    cfg: &SmootherConfig,
    rotations: &mut RotationSource,
) -> Result<CycleReport> {
    cfg.validate()?;
    check_window(store, new_obs, &cfg.daw)?;
    let lag = cfg.daw.lag;
    let first_new = lag + 1 - new_obs.len();
    let calls = model.model_calls();
    let mut sweep = LaggedEnsembleStore::new(inflate(store.front(), cfg.inflation)?, store.start_index);
    let mut iterations = 0;
    let mut forecast_mean = sweep.back().mean();
    for k in 1..=lag {
        let forecast = EnsembleMatrix::new(model.forecast_columns(sweep.back().members(), 1)?)?;
        forecast_mean = forecast.mean();
        let obs = if k >= first_new { new_obs[k - first_new].as_ref() } else { None };
        match obs {
            None => sweep.push(forecast)?,
            Some(obs) => {
                let rotation = rotations.next(forecast.size())?;
                let (analysis, pkg, its) =
                    filter_analysis(&cfg.filter, &forecast, &obs.operator, &obs.y, rotation.as_ref())?;
                iterations += its;
                sweep.transform_all(&pkg)?;
                sweep.push(analysis)?;
            }
        }
    }
    *store = sweep;
    Ok(CycleReport {
        start_index: store.start_index,
        window: store.iter().cloned().collect(),
        forecast_mean,
        iterations,
        model_calls: model.model_calls() - calls,
    })
}

/// Result of the IEnKS Gauss-Newton iteration over one window.
#[derive(Clone, Debug)]
pub struct BundleOutcome {
    /// Posterior ensemble at `t_0`.
    pub initial: EnsembleMatrix,
    /// Posterior ensembles at `t_0..t_L`.
    pub window: Vec<EnsembleMatrix>,
    pub package: TransformPackage,
    /// Iterations whose weight increment exceeded the tolerance.
    pub iterations: usize,
    /// Bundle sweeps through the window, excluding the final propagation.
    pub sweeps: usize,
    /// Ensemble cost at each evaluated iterate.
    pub cost_history: Vec<f64>,
    /// Gradient norm at the last evaluated iterate.
    pub gradient_norm: f64,
    /// Bundle mean at `t_L` at the prior weights (forecast of the prior mean).
    pub forecast_mean: Vector,
    pub converged: bool,
}

/// IEnKS in its bundle form.
///
/// `window[k]` is the observation at `t_{k+1}`; `None` entries are not in
/// the cost (already assimilated or missing). Each Gauss-Newton iteration
/// propagates `x̂ⁱ1ᵀ + εX_0` through the nonlinear model over the window
/// and forms `ŷ_k`, `Ỹ_k` from the bundle. On exit the posterior transform
/// is applied to `E_0` and the result is propagated through the window.
pub fn ienks_bundle_solve(
    prior: &EnsembleMatrix,
    window: &[Option<Observation>],
    model: &DynamicalModel,
    cfg: &MlefConfig,
    rotation: Option<&Matrix>,
) -> Result<BundleOutcome> {
    cfg.validate()?;
    check_dim(model.state_dim(), prior.state_dim())?;
    let n = prior.size();
    let floor = n as f64 - 1.0;
    let mean = prior.mean();
    let x0 = prior.perturbations();
    let mut w = Vector::zeros(n);
    let mut hessian: Option<SpectralSym> = None;
    let mut iterations = 0;
    let mut sweeps = 0;
    let mut converged = false;
    let mut cost_history = Vec::new();
    let mut gradient_norm = f64::NAN;
    let mut forecast_mean = None;
    for _ in 0..cfg.max_iter {
        let state = &mean + &x0 * &w;
        let mut bundle = &x0 * cfg.epsilon;
        for mut col in bundle.column_iter_mut() {
            col += &state;
        }
        let mut blocks: Vec<(Matrix, Vector)> = Vec::new();
        for obs in window {
            bundle = model.forecast_columns(&bundle, 1)?;
            if let Some(obs) = obs {
                let hb = obs.operator.apply_columns(&bundle)?;
                let y_tilde = centre(&hb) / cfg.epsilon;
                blocks.push(whitened(&obs.operator, &y_tilde, &(&obs.y - hb.column_mean())));
            }
        }
        sweeps += 1;
        if forecast_mean.is_none() {
            forecast_mean = Some(bundle.column_mean());
        }
        let rows: usize = blocks.iter().map(|(s, _)| s.nrows()).sum();
        let mut s = Matrix::zeros(rows, n);
        let mut d = Vector::zeros(rows);
        let mut r = 0;
        for (sk, dk) in &blocks {
            s.rows_mut(r, sk.nrows()).copy_from(sk);
            d.rows_mut(r, dk.len()).copy_from(dk);
            r += sk.nrows();
        }
        cost_history.push(0.5 * floor * w.norm_squared() + 0.5 * d.norm_squared());
        let xi = SpectralSym::shifted_gram(floor, &s)?;
        let gradient = &w * floor - s.tr_mul(&d);
        gradient_norm = gradient.norm();
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
    let initial = EnsembleMatrix::new(package.apply(prior.members())?)?;
    let mut out = vec![initial.clone()];
    for _ in window {
        let next = model.forecast_columns(out.last().expect("non-empty").members(), 1)?;
        out.push(EnsembleMatrix::new(next)?);
    }
    Ok(BundleOutcome {
        initial,
        window: out,
        package,
        iterations,
        sweeps,
        cost_history,
        gradient_norm,
        forecast_mean: forecast_mean.expect("at least one sweep"),
        converged,
    })
}

/// One IEnKS cycle: a global 4D analysis of the new observations from the
/// (inflated) prior at `t_0`, followed by one propagation sweep of the
/// posterior. The posterior at `t_S` becomes the next prior.
pub fn ienks_cycle(
    store: &mut LaggedEnsembleStore,
    model: &DynamicalModel,
    new_obs: &[Option<Observation>],
    cfg: &SmootherConfig,
    rotations: &mut RotationSource,
) -> Result<(CycleReport, BundleOutcome)> {
    cfg.validate()?;
    check_window(store, new_obs, &cfg.daw)?;
    let lag = cfg.daw.lag;
    let calls = model.model_calls();
    let prior = inflate(store.front(), cfg.inflation)?;
    let mut window: Vec<Option<Observation>> = vec![None; lag - new_obs.len()];
    window.extend(new_obs.iter().cloned());
    let rotation = rotations.next(prior.size())?;
    let out = ienks_bundle_solve(&prior, &window, model, &cfg.bundle, rotation.as_ref())?;
    let mut next = LaggedEnsembleStore::new(out.initial.clone(), store.start_index);
    for e in &out.window[1..] {
        next.push(e.clone())?;
    }
    *store = next;
    let report = CycleReport {
        start_index: store.start_index,
        window: out.window.clone(),
        forecast_mean: out.forecast_mean.clone(),
        iterations: out.iterations,
        model_calls: model.model_calls() - calls,
    };
    Ok((report, out))
}

/// Which fixed-lag ensemble smoother to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmootherKind {
    Enks,
    Sienks,
    Ienks,
}

/// A smoother with its store, driven one cycle at a time.
#[derive(Clone, Debug)]
pub struct EnsembleSmoother {
    kind: SmootherKind,
    cfg: SmootherConfig,
    store: LaggedEnsembleStore,
    rotations: RotationSource,
    cycles: usize,
}

impl EnsembleSmoother {
    pub fn new(
        kind: SmootherKind,
        cfg: SmootherConfig,
        initial: EnsembleMatrix,
        time_index: usize,
        rotations: RotationSource,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { kind, cfg, store: LaggedEnsembleStore::new(initial, time_index), rotations, cycles: 0 })
    }

    pub fn kind(&self) -> SmootherKind {
        self.kind
    }

    pub fn store(&self) -> &LaggedEnsembleStore {
        &self.store
    }

    /// Observations the next cycle expects: `L` on the first, `S` after.
    pub fn new_observations(&self) -> usize {
        if self.cycles == 0 {
            self.cfg.daw.lag
        } else {
            self.cfg.daw.shift
        }
    }

    /// Runs one cycle and shifts the window.
    pub fn cycle(&mut self, model: &DynamicalModel, new_obs: &[Option<Observation>]) -> Result<CycleReport> {
        let report = match self.kind {
            SmootherKind::Enks => enks_cycle(&mut self.store, model, new_obs, &self.cfg, &mut self.rotations)?,
            SmootherKind::Sienks => sienks_cycle(&mut self.store, model, new_obs, &self.cfg, &mut self.rotations)?,
            SmootherKind::Ienks => ienks_cycle(&mut self.store, model, new_obs, &self.cfg, &mut self.rotations)?.0,
        };
        shift_daw(&mut self.store, self.cfg.daw.shift)?;
        self.cycles += 1;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::dynamics::{LinearField, ObservationModel};
    use crate::ensemble::{etkf_analysis, etkf_transform};
    use crate::gaussian::{sample_gaussian, GaussianBelief};
    use crate::linalg::SymPosDef;
    use crate::rng;

    fn initial(n_x: usize, n_e: usize, seed: u64) -> EnsembleMatrix {
        let belief =
            GaussianBelief::new(Vector::from_fn(n_x, |i, _| 0.3 * i as f64), SymPosDef::identity(n_x)).unwrap();
        sample_gaussian(&belief, n_e, seed).unwrap()
    }

    fn rotation_field(n: usize) -> DynamicalModel {
        let a = Matrix::from_fn(n, n, |i, j| match (i as i64 - j as i64).rem_euclid(n as i64) {
            1 => 0.8,
            k if k == n as i64 - 1 => -0.8,
            0 => -0.05,
            _ => 0.0,
        });
        DynamicalModel::linear(a, 0.01, 0.05).unwrap()
    }

    fn observations(n_x: usize, count: usize, seed: u64) -> Vec<Option<Observation>> {
        let op = Arc::new(ObservationModel::identity(n_x, 0.5).unwrap());
        let mut rng = rng::stream(seed, rng::streams::OBSERVATION_NOISE);
        (0..count)
            .map(|k| {
                let y = Vector::from_fn(n_x, |i, _| {
                    (0.1 * (k + i) as f64).sin() + 0.5 * rng::standard_normal_vector(&mut rng, 1)[0]
                });
                Some(Observation::new(op.clone(), y).unwrap())
            })
            .collect()
    }

    fn store_of(n: usize) -> LaggedEnsembleStore {
        let mut store = LaggedEnsembleStore::new(initial(2, 3, 0), 5);
        for k in 1..n {
            store.push(initial(2, 3, k as u64)).unwrap();
        }
        store
    }

    #[test]
    fn daw_config_rejects_bad_shift() {
        assert!(DAWConfig::new(3, 4).is_err());
        assert!(DAWConfig::new(3, 0).is_err());
        assert!(DAWConfig::new(0, 0).is_err());
        assert!(DAWConfig::new(3, 3).is_ok());
    }

    #[test]
    fn shift_by_lag_keeps_terminal_state() {
        let mut store = store_of(4);
        let last = store.back().clone();
        shift_daw(&mut store, 3).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.start_index(), 8);
        assert_eq!(store.front(), &last);
    }

    #[test]
    fn shifts_compose_and_preserve_contents() {
        let mut a = store_of(5);
        let mut b = a.clone();
        shift_daw(&mut a, 1).unwrap();
        shift_daw(&mut a, 1).unwrap();
        shift_daw(&mut b, 2).unwrap();
        assert_eq!(a, b);
        let original = store_of(5);
        for t in 7..10 {
            assert_eq!(a.get(t), original.get(t));
        }
        assert!(a.get(6).is_none());
    }

    #[test]
    fn shift_beyond_store_is_invalid() {
        let mut store = store_of(3);
        assert!(matches!(shift_daw(&mut store, 3), Err(Error::InvalidShift { .. })));
        assert!(matches!(shift_daw(&mut store, 0), Err(Error::InvalidShift { .. })));
    }

    #[test]
    fn incomplete_window_underflows() {
        let model = rotation_field(3);
        let cfg = SmootherConfig::new(DAWConfig::new(3, 1).unwrap());
        let mut store = LaggedEnsembleStore::new(initial(3, 5, 1), 0);
        let obs = observations(3, 2, 1);
        let err = enks_cycle(&mut store, &model, &obs, &cfg, &mut RotationSource::identity()).unwrap_err();
        assert!(matches!(err, Error::WindowUnderflow));
    }

    #[test]
    fn lag_one_enks_is_the_etkf() {
        let model = rotation_field(4);
        let obs = observations(4, 10, 2);
        let mut smoother = EnsembleSmoother::new(
            SmootherKind::Enks,
            SmootherConfig::new(DAWConfig::new(1, 1).unwrap()),
            initial(4, 6, 2),
            0,
            RotationSource::identity(),
        )
        .unwrap();
        let mut filter = initial(4, 6, 2);
        for y in obs.chunks(1) {
            let report = smoother.cycle(&model, y).unwrap();
            let forecast = EnsembleMatrix::new(model.forecast_columns(filter.members(), 1).unwrap()).unwrap();
            let y = y[0].as_ref().unwrap();
            filter = etkf_analysis(&forecast, &etkf_transform(&forecast, &y.operator, &y.y, None).unwrap()).unwrap();
            assert_eq!(report.lagged(0).unwrap(), &filter);
        }
    }

    #[test]
    fn enks_filter_marginal_ignores_the_store() {
        // Filter ensembles must be those of a plain ETKF run with no lagged states.
        let model = rotation_field(3);
        let obs = observations(3, 9, 3);
        let cfg = SmootherConfig::new(DAWConfig::new(3, 2).unwrap());
        let mut smoother =
            EnsembleSmoother::new(SmootherKind::Enks, cfg, initial(3, 5, 3), 0, RotationSource::identity()).unwrap();
        let mut filter = initial(3, 5, 3);
        let mut filtered = Vec::new();
        for o in &obs {
            let forecast = EnsembleMatrix::new(model.forecast_columns(filter.members(), 1).unwrap()).unwrap();
            let o = o.as_ref().unwrap();
            filter = etkf_analysis(&forecast, &etkf_transform(&forecast, &o.operator, &o.y, None).unwrap()).unwrap();
            filtered.push(filter.clone());
        }
        let mut used = 0;
        while used < obs.len() {
            let k = smoother.new_observations();
            let report = smoother.cycle(&model, &obs[used..used + k]).unwrap();
            used += k;
            assert_eq!(report.lagged(0).unwrap(), &filtered[used - 1]);
        }
    }

    #[test]
    fn sienks_sweeps_once_per_cycle() {
        let model = Arc::new(DynamicalModel::lorenz96(8, 8.0).unwrap());
        let op = Arc::new(ObservationModel::identity(8, 1.0).unwrap());
        let truth = model.forecast(&Vector::from_fn(8, |i, _| 8.0 + (i as f64).cos()), 20).unwrap();
        let mut smoother = EnsembleSmoother::new(
            SmootherKind::Sienks,
            SmootherConfig::new(DAWConfig::new(3, 2).unwrap()),
            EnsembleMatrix::new(Matrix::from_fn(8, 6, |i, j| truth[i] + 0.1 * ((i * 7 + j * 3) % 5) as f64)).unwrap(),
            0,
            RotationSource::identity(),
        )
        .unwrap();
        for _ in 0..4 {
            let n = smoother.new_observations();
            let obs: Vec<_> = (0..n).map(|_| Some(Observation::new(op.clone(), truth.clone()).unwrap())).collect();
            let report = smoother.cycle(&model, &obs).unwrap();
            assert_eq!(report.model_calls, (3 * 6 * model.substeps()) as u64);
        }
    }

    #[test]
    fn ienks_counts_sweeps() {
        let model = DynamicalModel::lorenz96(8, 8.0).unwrap();
        let op = Arc::new(ObservationModel::identity(8, 1.0).unwrap());
        let prior = EnsembleMatrix::new(Matrix::from_fn(8, 6, |i, j| 8.0 * ((i + 2 * j) as f64).sin())).unwrap();
        let y = model.forecast(&prior.mean(), 2).unwrap();
        let window = vec![None, Some(Observation::new(op, y).unwrap())];
        let before = model.model_calls();
        let out = ienks_bundle_solve(&prior, &window, &model, &MlefConfig::default(), None).unwrap();
        let per_sweep = (2 * 6 * model.substeps()) as u64;
        assert_eq!(model.model_calls() - before, (out.sweeps as u64 + 1) * per_sweep);
        assert_eq!(out.cost_history.len(), out.sweeps);
        assert_eq!(out.window.len(), 3);
    }

    #[test]
    fn degenerate_ienks_window_is_the_etkf() {
        let model = DynamicalModel::new(Arc::new(LinearField::zero(4)), 0.01, 0.05).unwrap();
        let prior = initial(4, 7, 4);
        let obs = Arc::new(
            ObservationModel::linear(Matrix::from_fn(2, 4, |i, j| (i + j) as f64 * 0.5), SymPosDef::identity(2))
                .unwrap(),
        );
        let y = Vector::from_vec(vec![1.0, -0.5]);
        let window = vec![Some(Observation::new(obs.clone(), y.clone()).unwrap())];
        let out = ienks_bundle_solve(&prior, &window, &model, &MlefConfig::default(), None).unwrap();
        let etkf = etkf_analysis(&prior, &etkf_transform(&prior, &obs, &y, None).unwrap()).unwrap();
        assert!((out.initial.members() - etkf.members()).amax() < 1e-9);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn linear_schemes_agree() {
        let n_x = 3;
        let model = rotation_field(n_x);
        let obs = observations(n_x, 12, 5);
        let cfg = SmootherConfig::new(DAWConfig::new(3, 1).unwrap());
        let run = |kind| {
            let mut s =
                EnsembleSmoother::new(kind, cfg.clone(), initial(n_x, 6, 5), 0, RotationSource::identity()).unwrap();
            let mut used = 0;
            let mut reports = Vec::new();
            while used < obs.len() {
                let k = s.new_observations();
                reports.push(s.cycle(&model, &obs[used..used + k]).unwrap());
                used += k;
            }
            reports
        };
        let enks = run(SmootherKind::Enks);
        for other in [run(SmootherKind::Sienks), run(SmootherKind::Ienks)] {
            for (a, b) in enks.iter().zip(&other) {
                assert_eq!(a.start_index, b.start_index);
                for (ea, eb) in a.window.iter().zip(&b.window) {
                    assert!((ea.members() - eb.members()).amax() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn smoothed_covariances_are_psd_and_low_rank() {
        let model = rotation_field(6);
        let obs = observations(6, 6, 6);
        let mut s = EnsembleSmoother::new(
            SmootherKind::Enks,
            SmootherConfig::new(DAWConfig::new(2, 1).unwrap()),
            initial(6, 4, 6),
            0,
            RotationSource::random(6),
        )
        .unwrap();
        let mut used = 0;
        while used < obs.len() {
            let k = s.new_observations();
            let report = s.cycle(&model, &obs[used..used + k]).unwrap();
            used += k;
            for e in &report.window {
                let eig = nalgebra::SymmetricEigen::new(e.covariance()).eigenvalues;
                let scale = eig.amax();
                assert!(eig.iter().all(|&l| l > -1e-12 * scale));
                assert!(eig.iter().filter(|&&l| l > 1e-10 * scale).count() <= 3);
            }
        }
    }
}
