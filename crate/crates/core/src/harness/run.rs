//! Twin-experiment engine: truth, observations, cycling and scoring.

use std::sync::Arc;

use crate::daml::{
    coordinate_descent_train, trajectory_from_observations, DaStepConfig, ErrorStatistics, FeatureSet, Hyperprior,
    SurrogateModel, TrainConfig,
};
use crate::dynamics::{DynamicalModel, ElementwiseKind, Lorenz96, Observation, ObservationModel, Trajectory};
use crate::ensemble::{filter_analysis, inflate, FilterKind, MlefConfig, RotationSource};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{sample_gaussian_with, EnsembleMatrix, GaussianBelief};
use crate::kalman::{ekf_analysis, ekf_forecast, kf_analysis, kf_forecast, BeliefKind, KalmanState};
use crate::linalg::SymPosDef;
use crate::rng::{self, standard_normal_vector, streams};
use crate::smoothers::{DAWConfig, EnsembleSmoother, SmootherConfig, SmootherKind};
use crate::var::{fourdvar_solve, threedvar_solve, BackgroundFactor, VarConfig};
use crate::{Matrix, Vector};

use super::config::{ExperimentConfig, ModelName, ModelSpec, ObservationSpec, OperatorName, Scheme, SmootherFilter};

/// Model-error variance used by DA-ML when `q_scale` is unset.
pub const DEFAULT_DAML_Q: f64 = 1e-2;

/// Free-run length used to estimate the variational background covariance.
const CLIMATOLOGY_SAMPLES: usize = 2000;
const CLIMATOLOGY_SPINUP: usize = 500;

/// `√(mean_i (a_i − b_i)²)`.
pub fn score_rmse(estimate: &Vector, truth: &Vector) -> Result<f64> {
    check_dim(truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::DimensionTooSmall(0));
    }
    Ok(((estimate - truth).norm_squared() / truth.len() as f64).sqrt())
}

pub fn build_model(spec: &ModelSpec) -> Result<DynamicalModel> {
    match spec.name {
        ModelName::Lorenz96 => DynamicalModel::new(
            Arc::new(Lorenz96::new(spec.state_dim, spec.forcing)?),
            spec.step_size,
            spec.forecast_horizon,
        ),
        ModelName::Linear => DynamicalModel::linear(linear_matrix(spec), spec.step_size, spec.forecast_horizon),
    }
}

/// Explicit `A`, or the periodic damped advection operator.
fn linear_matrix(spec: &ModelSpec) -> Matrix {
    let n = spec.state_dim;
    if let Some(rows) = &spec.matrix {
        return Matrix::from_fn(n, n, |i, j| rows[i][j]);
    }
    let mut a = Matrix::identity(n, n) * -spec.damping;
    if n > 1 {
        for i in 0..n {
            a[(i, (i + 1) % n)] += spec.advection;
            a[(i, (i + n - 1) % n)] -= spec.advection;
        }
    }
    a
}

/// Observation operator of the configuration with `R = r I`.
pub fn build_observation(spec: &ObservationSpec, state_dim: usize, r: f64) -> Result<ObservationModel> {
    let components = spec.components.clone().unwrap_or_else(|| (0..state_dim).collect());
    let kind = match spec.operator {
        OperatorName::Identity => ElementwiseKind::Identity,
        OperatorName::Square => ElementwiseKind::Square,
        OperatorName::SignedPower => ElementwiseKind::SignedPower(spec.power.unwrap_or(1.0)),
    };
    ObservationModel::elementwise(state_dim, components, kind, r)
}

/// Truth at `t_0..t_K` and observations `y_1..y_K` (`obs[k]` is at `t_{k+1}`).
///
/// The truth starts from a seeded state run through `truth_spinup`
/// intervals; linear models with `model_error_scale > 0` add Gaussian noise
/// every interval. With `r_scale = 0` the observations are noiseless.
pub fn generate_truth_and_obs(cfg: &ExperimentConfig, seed: u64) -> Result<(Trajectory, Vec<Vector>)> {
    let model = build_model(&cfg.model)?;
    let n = cfg.model.state_dim;
    let q = cfg.model.model_error_scale;
    let mut truth_rng = rng::stream(seed, streams::TRUTH);
    let mut x = standard_normal_vector(&mut truth_rng, n);
    if cfg.model.name == ModelName::Lorenz96 {
        x.add_scalar_mut(cfg.model.forcing);
    }
    let step = |x: &Vector, rng: &mut rng::Rng| -> Result<Vector> {
        let mut next = model.forecast(x, 1)?;
        if q > 0.0 {
            next += standard_normal_vector(rng, n) * q.sqrt();
        }
        Ok(next)
    };
    for _ in 0..cfg.model.truth_spinup {
        x = step(&x, &mut truth_rng)?;
    }
    let count = cfg.observation_count();
    let mut states = Vec::with_capacity(count + 1);
    states.push(x);
    for k in 0..count {
        let next = step(&states[k], &mut truth_rng)?;
        states.push(next);
    }
    let r = cfg.observation.r_scale;
    let op = build_observation(&cfg.observation, n, if r > 0.0 { r } else { 1.0 })?;
    let mut noise_rng = rng::stream(seed, streams::OBSERVATION_NOISE);
    let mut obs = Vec::with_capacity(count);
    for x in &states[1..] {
        let mut y = op.apply(x)?;
        if r > 0.0 {
            y += standard_normal_vector(&mut noise_rng, y.len()) * r.sqrt();
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        obs.push(y);
    }
    Ok((Trajectory::from_vectors(0, states)?, obs))
}

/// One scored cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub cycle: usize,
    pub forecast_rmse: f64,
    pub analysis_rmse: f64,
    /// Smoothed RMSE at lag `0..=L` behind the newest time of the cycle.
    pub smoother_rmse: Vec<f64>,
    pub spread: f64,
    pub model_calls: u64,
    pub iterations: usize,
}

/// Per-cycle scores of the scored part of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSeries {
    /// Largest smoother lag reported (0 for filters).
    pub lag: usize,
    pub rows: Vec<ScoreRow>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn forecast_rmse(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.forecast_rmse).collect()
    }

    pub fn analysis_rmse(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.analysis_rmse).collect()
    }

    pub fn spread(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.spread).collect()
    }

    pub fn smoother_rmse(&self, lag: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.smoother_rmse[lag]).collect()
    }

    pub fn model_calls(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.model_calls).collect()
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iterations).collect()
    }

    pub fn mean_forecast_rmse(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.forecast_rmse))
    }

    pub fn mean_analysis_rmse(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.analysis_rmse))
    }

    pub fn mean_smoother_rmse(&self, lag: usize) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.smoother_rmse[lag]))
    }

    pub fn mean_spread(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.spread))
    }

    pub fn total_model_calls(&self) -> u64 {
        self.rows.iter().map(|r| r.model_calls).sum()
    }

    pub fn mean_iterations(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.iterations as f64))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Outcome of [`run_experiment`]. A divergent run keeps the rows scored
/// before the failure and records it in `failure`.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub series: ScoreSeries,
    /// Analysis RMSE above which the run is declared divergent.
    pub divergence_threshold: f64,
    pub failure: Option<Error>,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        self.failure.is_some()
    }

    pub fn into_result(self) -> Result<ScoreSeries> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.series),
        }
    }
}

/// Collects scored rows and enforces the divergence threshold.
struct Recorder<'a> {
    truth: &'a [Vector],
    spinup: usize,
    threshold: f64,
    series: ScoreSeries,
}

impl Recorder<'_> {
    /// `window` holds the estimates at `end_time − L ..= end_time`, oldest
    /// first.
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        cycle: usize,
        end_time: usize,
        forecast: &Vector,
        window: &[Vector],
        spread: f64,
        model_calls: u64,
        iterations: usize,
    ) -> Result<()> {
        let lag = self.series.lag;
        check_dim(lag + 1, window.len())?;
        let analysis_rmse = score_rmse(&window[lag], &self.truth[end_time])?;
        if !analysis_rmse.is_finite() || analysis_rmse > self.threshold {
            return Err(Error::FilterDivergence { cycle, rmse: analysis_rmse, threshold: self.threshold });
        }
        if cycle <= self.spinup {
            return Ok(());
        }
        let smoother_rmse =
            (0..=lag).map(|l| score_rmse(&window[lag - l], &self.truth[end_time - l])).collect::<Result<Vec<_>>>()?;
        let row = ScoreRow {
            cycle,
            forecast_rmse: score_rmse(forecast, &self.truth[end_time])?,
            analysis_rmse,
            smoother_rmse,
            spread,
            model_calls,
            iterations,
        };
        if !(row.forecast_rmse.is_finite() && row.spread.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        self.series.rows.push(row);
        Ok(())
    }
}

/// `√(mean_i var_t(x_i))` over a set of states.
fn climatological_spread(states: &[Vector]) -> f64 {
    let n = states.len() as f64;
    if states.len() < 2 {
        return 0.0;
    }
    let m = states.iter().fold(Vector::zeros(states[0].len()), |acc, x| acc + x) / n;
    let ss: f64 = states.iter().map(|x| (x - &m).norm_squared()).sum();
    (ss / ((n - 1.0) * m.len() as f64)).sqrt()
}

/// Sample covariance of a long seeded free run of the model.
fn climatology(cfg: &ExperimentConfig, model: &DynamicalModel, start: &Vector) -> Result<SymPosDef> {
    let n = start.len();
    let q = cfg.model.model_error_scale;
    let mut rng = rng::stream(cfg.run.seed, streams::CLIMATOLOGY);
    let mut x = start + standard_normal_vector(&mut rng, n);
    let mut samples = Vec::with_capacity(CLIMATOLOGY_SAMPLES);
    for k in 0..CLIMATOLOGY_SPINUP + CLIMATOLOGY_SAMPLES {
        x = model.forecast(&x, 1)?;
        if q > 0.0 {
            x += standard_normal_vector(&mut rng, n) * q.sqrt();
        }
        if k >= CLIMATOLOGY_SPINUP {
            samples.push(x.clone());
        }
    }
    let count = samples.len() as f64;
    let m = samples.iter().fold(Vector::zeros(n), |acc, x| acc + x) / count;
    let mut cov = Matrix::zeros(n, n);
    for s in &samples {
        let d = s - &m;
        cov += &d * d.transpose();
    }
    cov /= count - 1.0;
    SymPosDef::from_symmetrised(cov)
        .map_err(|_| Error::Config("climatological covariance is degenerate; use a model with variability".into()))
}

fn cov_spread(cov: &SymPosDef) -> f64 {
    (cov.matrix().trace() / cov.dim() as f64).sqrt()
}

fn add_model_noise(state: KalmanState, q: f64) -> Result<KalmanState> {
    if q == 0.0 {
        return Ok(state);
    }
    let n = state.belief.dim();
    let cov = SymPosDef::from_symmetrised(state.belief.cov.matrix() + Matrix::identity(n, n) * q)?;
    Ok(KalmanState::new(GaussianBelief { mean: state.belief.mean, cov }, state.time_index, state.kind))
}

/// Everything an estimator loop needs.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: DynamicalModel,
    operator: Arc<ObservationModel>,
    observations: Vec<Option<Observation>>,
    prior: GaussianBelief,
    rng: rng::Rng,
}

impl Context<'_> {
    fn var_config(&self) -> VarConfig {
        let t = &self.cfg.estimator.tolerances;
        VarConfig { max_outer_iter: t.max_iter, weight_tol: t.weight_tol, cg_tol: t.cg_tol, cg_max_iter: None }
    }

    fn mlef_config(&self) -> MlefConfig {
        let t = &self.cfg.estimator.tolerances;
        MlefConfig { epsilon: t.epsilon, weight_tol: t.weight_tol, max_iter: t.max_iter }
    }

    fn rotations(&self) -> RotationSource {
        if self.cfg.estimator.random_rotation {
            RotationSource::random(self.cfg.run.seed)
        } else {
            RotationSource::identity()
        }
    }

    fn initial_ensemble(&mut self) -> Result<EnsembleMatrix> {
        let n = self.cfg.estimator.ensemble_size.unwrap_or(0);
        sample_gaussian_with(&self.prior, n, &mut self.rng)
    }

    fn y(&self, k: usize) -> &Vector {
        &self.observations[k].as_ref().expect("every time is observed").y
    }
}

/// Runs spinup and scored cycles of the configured estimator.
///
/// Filter divergence and non-finite states end the run early; the rows
/// scored so far are kept and the error is stored in the result. Any other
/// error is returned directly.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate_for_run()?;
    let (truth, obs) = generate_truth_and_obs(cfg, cfg.run.seed)?;
    let truth: Vec<Vector> = truth.states.into_iter().map(|s| s.values).collect();
    let n = cfg.model.state_dim;
    let r = cfg.observation.r_scale;
    let threshold = 10.0 * climatological_spread(&truth).max(r.sqrt());
    let operator = Arc::new(build_observation(&cfg.observation, n, r)?);
    let observations =
        obs.into_iter().map(|y| Observation::new(Arc::clone(&operator), y).map(Some)).collect::<Result<Vec<_>>>()?;
    let mut init_rng = rng::stream(cfg.run.seed, streams::INITIAL_CONDITION);
    let p = cfg.estimator.prior_scale;
    let prior_mean = &truth[0] + standard_normal_vector(&mut init_rng, n) * p.sqrt();
    let prior = GaussianBelief::new(prior_mean, SymPosDef::scaled_identity(n, p))?;
    let mut ctx = Context { cfg, model: build_model(&cfg.model)?, operator, observations, prior, rng: init_rng };
    let lag = match cfg.estimator.scheme {
        Scheme::Enks | Scheme::Ienks | Scheme::Sienks | Scheme::FourDVar => cfg.lag(),
        _ => 0,
    };
    let mut rec = Recorder {
        truth: &truth,
        spinup: cfg.run.spinup_cycles,
        threshold,
        series: ScoreSeries { lag, rows: Vec::new() },
    };
    let outcome = match cfg.estimator.scheme {
        Scheme::Kf | Scheme::Ekf => run_kalman(&mut ctx, &mut rec),
        Scheme::ThreeDVar => run_threedvar(&mut ctx, &mut rec, &truth[0]),
        Scheme::FourDVar => run_fourdvar(&mut ctx, &mut rec, &truth[0]),
        Scheme::Etkf | Scheme::Mlef => run_ensemble_filter(&mut ctx, &mut rec),
        Scheme::Enks | Scheme::Sienks | Scheme::Ienks => run_smoother(&mut ctx, &mut rec),
        Scheme::Daml => run_daml(&mut ctx, &mut rec),
    };
    let failure = match outcome {
        Ok(()) => None,
        Err(e @ (Error::FilterDivergence { .. } | Error::NonFiniteState)) => Some(e),
        Err(e) => return Err(e),
    };
    Ok(RunResult { config: cfg.clone(), series: rec.series, divergence_threshold: threshold, failure })
}

fn run_kalman(ctx: &mut Context, rec: &mut Recorder) -> Result<()> {
    let q = ctx.cfg.model.model_error_scale;
    let linear = ctx.cfg.estimator.scheme == Scheme::Kf;
    let resolvent =
        if linear { Some(ctx.model.linearise(&Vector::zeros(ctx.prior.dim()))?.1.resolvent()) } else { None };
    let mut state = KalmanState::new(ctx.prior.clone(), 0, BeliefKind::Analysis);
    for cycle in 1..=ctx.cfg.total_cycles() {
        let calls = ctx.model.model_calls();
        let forecast = match &resolvent {
            Some(m) => kf_forecast(&state, m)?,
            None => ekf_forecast(&state, &ctx.model)?,
        };
        let forecast = add_model_noise(forecast, q)?;
        state = if linear {
            kf_analysis(&forecast, &ctx.operator, ctx.y(cycle - 1))?
        } else {
            ekf_analysis(&forecast, &ctx.operator, ctx.y(cycle - 1))?
        };
        let calls = ctx.model.model_calls() - calls;
        let spread = cov_spread(&state.belief.cov);
        rec.record(cycle, cycle, &forecast.belief.mean, std::slice::from_ref(&state.belief.mean), spread, calls, 1)?;
    }
    Ok(())
}

fn static_background(ctx: &Context, truth0: &Vector) -> Result<(BackgroundFactor, f64)> {
    let clim = climatology(ctx.cfg, &ctx.model, truth0)?;
    let b = SymPosDef::from_symmetrised(clim.matrix() * ctx.cfg.estimator.climatology_scale)?;
    let spread = cov_spread(&b);
    let belief = GaussianBelief::new(Vector::zeros(b.dim()), b)?;
    Ok((BackgroundFactor::from_belief(&belief), spread))
}

fn run_threedvar(ctx: &mut Context, rec: &mut Recorder, truth0: &Vector) -> Result<()> {
    let (sigma, spread) = static_background(ctx, truth0)?;
    let vcfg = ctx.var_config();
    let mut mean = ctx.prior.mean.clone();
    for cycle in 1..=ctx.cfg.total_cycles() {
        let calls = ctx.model.model_calls();
        let forecast = ctx.model.forecast(&mean, 1)?;
        let out = threedvar_solve(&forecast, &sigma, &ctx.operator, ctx.y(cycle - 1), &vcfg)?;
        mean = out.initial;
        let calls = ctx.model.model_calls() - calls;
        rec.record(cycle, cycle, &forecast, std::slice::from_ref(&mean), spread, calls, out.iterations)?;
    }
    Ok(())
}

fn run_fourdvar(ctx: &mut Context, rec: &mut Recorder, truth0: &Vector) -> Result<()> {
    let (sigma, spread) = static_background(ctx, truth0)?;
    let vcfg = ctx.var_config();
    let lag = ctx.cfg.lag();
    let mut mean = ctx.prior.mean.clone();
    let mut pos = 0;
    for cycle in 1..=ctx.cfg.total_cycles() {
        let calls = ctx.model.model_calls();
        let forecast = ctx.model.forecast(&mean, lag)?;
        let out = fourdvar_solve(&ctx.model, &mean, &sigma, &ctx.observations[pos..pos + lag], &vcfg)?;
        let window: Vec<Vector> = out.trajectory.states.into_iter().map(|s| s.values).collect();
        pos += lag;
        let calls = ctx.model.model_calls() - calls;
        rec.record(cycle, pos, &forecast, &window, spread, calls, out.outcome.iterations)?;
        mean = window[lag].clone();
    }
    Ok(())
}

fn run_ensemble_filter(ctx: &mut Context, rec: &mut Recorder) -> Result<()> {
    let kind = match ctx.cfg.estimator.scheme {
        Scheme::Mlef => FilterKind::Mlef(ctx.mlef_config()),
        _ => FilterKind::Etkf,
    };
    let inflation = ctx.cfg.estimator.inflation;
    let mut rotations = ctx.rotations();
    let mut ensemble = ctx.initial_ensemble()?;
    for cycle in 1..=ctx.cfg.total_cycles() {
        let calls = ctx.model.model_calls();
        let launch = inflate(&ensemble, inflation)?;
        let forecast = EnsembleMatrix::new(ctx.model.forecast_columns(launch.members(), 1)?)?;
        let rotation = rotations.next(forecast.size())?;
        let (analysis, _, iterations) =
            filter_analysis(&kind, &forecast, &ctx.operator, ctx.y(cycle - 1), rotation.as_ref())?;
        let calls = ctx.model.model_calls() - calls;
        let spread = analysis.spread();
        rec.record(cycle, cycle, &forecast.mean(), &[analysis.mean()], spread, calls, iterations)?;
        ensemble = analysis;
    }
    Ok(())
}

fn run_smoother(ctx: &mut Context, rec: &mut Recorder) -> Result<()> {
    let est = &ctx.cfg.estimator;
    let kind = match est.scheme {
        Scheme::Enks => SmootherKind::Enks,
        Scheme::Sienks => SmootherKind::Sienks,
        _ => SmootherKind::Ienks,
    };
    let filter = match est.filter {
        Some(SmootherFilter::Mlef) => FilterKind::Mlef(ctx.mlef_config()),
        _ => FilterKind::Etkf,
    };
    let scfg = SmootherConfig {
        daw: DAWConfig::new(ctx.cfg.lag(), ctx.cfg.shift())?,
        filter,
        inflation: est.inflation,
        bundle: ctx.mlef_config(),
    };
    let initial = ctx.initial_ensemble()?;
    let mut smoother = EnsembleSmoother::new(kind, scfg, initial, 0, ctx.rotations())?;
    let mut pos = 0;
    for cycle in 1..=ctx.cfg.total_cycles() {
        let count = smoother.new_observations();
        let report = smoother.cycle(&ctx.model, &ctx.observations[pos..pos + count])?;
        pos += count;
        let window: Vec<Vector> = report.window.iter().map(|e| e.mean()).collect();
        let spread = report.window.last().map(|e| e.spread()).unwrap_or(0.0);
        rec.record(cycle, pos, &report.forecast_mean, &window, spread, report.model_calls, report.iterations)?;
    }
    Ok(())
}

/// Batch DA-ML over the whole record. Rows are per observation time: the
/// analysis is the estimated trajectory and the forecast is the learned
/// surrogate applied to the previous estimate.
fn run_daml(ctx: &mut Context, rec: &mut Recorder) -> Result<()> {
    let est = &ctx.cfg.estimator;
    let n = ctx.prior.dim();
    let q = est.q_scale.unwrap_or(DEFAULT_DAML_Q);
    let features = est.features.unwrap_or(FeatureSet::Linear);
    let count = ctx.observations.len();
    let stats = ErrorStatistics::scalar(n, count, q)?;
    let init = SurrogateModel::persistence(features, n)?;
    let init_trajectory = trajectory_from_observations(&ctx.prior.mean, &ctx.observations)?;
    let tcfg = TrainConfig {
        outer_iters: est.tolerances.outer_iters,
        adaptive_q: est.adaptive_q,
        da: DaStepConfig { max_iter: 50.max(est.tolerances.max_iter), ..DaStepConfig::default() },
        ..TrainConfig::default()
    };
    let hyperprior = Hyperprior::GaussianInitial(ctx.prior.clone());
    let out = coordinate_descent_train(&ctx.observations, &init, &init_trajectory, &stats, &hyperprior, &tcfg)?;
    let states: Vec<Vector> = out.trajectory.states.into_iter().map(|s| s.values).collect();
    let spread = (out.stats.q.iter().map(|c| c.matrix().trace()).sum::<f64>() / (count * n) as f64).sqrt();
    for cycle in 1..=count {
        let forecast = out.surrogate.apply(&states[cycle - 1])?;
        rec.record(cycle, cycle, &forecast, std::slice::from_ref(&states[cycle]), spread, 0, out.outer_iterations)?;
    }
    Ok(())
}
