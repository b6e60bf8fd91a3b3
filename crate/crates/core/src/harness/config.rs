//! Experiment configuration, one experiment per TOML file.
//!
//! ```toml
//! [model]
//! name = "lorenz96"        # or "linear"
//! state_dim = 40
//! forcing = 8.0
//! step_size = 0.01         # RK4 step
//! forecast_horizon = 0.05  # time between observations
//!
//! [observation]
//! operator = "identity"    # identity | square | signed_power
//! components = [0, 2, 4]   # optional, defaults to every component
//! r_scale = 1.0            # R = r_scale I
//!
//! [estimator]
//! scheme = "etkf"
//! ensemble_size = 20
//! inflation = 1.02
//!
//! [run]
//! spinup_cycles = 500
//! scored_cycles = 5000
//! seed = 7
//!
//! [grid]                   # optional: one run per combination
//! "estimator.inflation" = [1.0, 1.02, 1.05]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::daml::FeatureSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Lorenz96,
    /// `dx/dt = A x`, with `A` given explicitly or a damped advection.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: ModelName,
    pub state_dim: usize,
    #[serde(default = "default_forcing")]
    pub forcing: f64,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_horizon")]
    pub forecast_horizon: f64,
    /// Linear model: explicit `A`, row by row.
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Linear model without `matrix`: `A_ii = −damping`.
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Linear model without `matrix`: `A_{i,i±1} = ±advection`.
    #[serde(default = "default_advection")]
    pub advection: f64,
    /// Variance of the additive model noise per interval, linear model
    /// only. Drives the truth and enters the KF and EKF forecasts.
    #[serde(default)]
    pub model_error_scale: f64,
    /// Intervals of free run discarded before the truth starts.
    #[serde(default = "default_truth_spinup")]
    pub truth_spinup: usize,
}

fn default_forcing() -> f64 {
    8.0
}
fn default_step() -> f64 {
    0.01
}
fn default_horizon() -> f64 {
    0.05
}
fn default_damping() -> f64 {
    0.1
}
fn default_advection() -> f64 {
    0.5
}
fn default_truth_spinup() -> usize {
    2000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorName {
    Identity,
    Square,
    SignedPower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    pub operator: OperatorName,
    #[serde(default)]
    pub components: Option<Vec<usize>>,
    /// Exponent of `signed_power`.
    #[serde(default)]
    pub power: Option<f64>,
    pub r_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Kf,
    Ekf,
    #[serde(rename = "3dvar")]
    ThreeDVar,
    #[serde(rename = "4dvar")]
    FourDVar,
    Etkf,
    Mlef,
    Enks,
    Ienks,
    Sienks,
    Daml,
}

impl Scheme {
    pub fn is_ensemble(self) -> bool {
        matches!(self, Scheme::Etkf | Scheme::Mlef | Scheme::Enks | Scheme::Ienks | Scheme::Sienks)
    }

    pub fn is_windowed(self) -> bool {
        matches!(self, Scheme::Enks | Scheme::Ienks | Scheme::Sienks | Scheme::FourDVar)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Kf => "kf",
            Scheme::Ekf => "ekf",
            Scheme::ThreeDVar => "3dvar",
            Scheme::FourDVar => "4dvar",
            Scheme::Etkf => "etkf",
            Scheme::Mlef => "mlef",
            Scheme::Enks => "enks",
            Scheme::Ienks => "ienks",
            Scheme::Sienks => "sienks",
            Scheme::Daml => "daml",
        }
    }
}

/// Filter transform used inside EnKS and SIEnKS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmootherFilter {
    Etkf,
    Mlef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub scheme: Scheme,
    #[serde(default)]
    pub ensemble_size: Option<usize>,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    #[serde(default)]
    pub lag: Option<usize>,
    #[serde(default)]
    pub shift: Option<usize>,
    /// EnKS / SIEnKS filter transform.
    #[serde(default)]
    pub filter: Option<SmootherFilter>,
    /// Random mean-preserving rotation after every ensemble analysis.
    #[serde(default)]
    pub random_rotation: bool,
    /// Variance of the initial estimate about the truth.
    #[serde(default = "default_prior_scale")]
    pub prior_scale: f64,
    /// Variational background covariance as a multiple of the climatology.
    #[serde(default = "default_climatology_scale")]
    pub climatology_scale: f64,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// DA-ML surrogate features.
    #[serde(default)]
    pub features: Option<FeatureSet>,
    /// DA-ML model-error variance `Q = q I`.
    #[serde(default)]
    pub q_scale: Option<f64>,
    #[serde(default)]
    pub adaptive_q: bool,
}

fn default_inflation() -> f64 {
    1.0
}
fn default_prior_scale() -> f64 {
    1.0
}
fn default_climatology_scale() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub weight_tol: f64,
    pub max_iter: usize,
    pub epsilon: f64,
    pub cg_tol: f64,
    pub outer_iters: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { weight_tol: 1e-3, max_iter: 10, epsilon: 1e-4, cg_tol: 1e-8, outer_iters: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_spinup")]
    pub spinup_cycles: usize,
    pub scored_cycles: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_spinup() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub observation: ObservationSpec,
    pub estimator: EstimatorSpec,
    pub run: RunSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Scheme-specific consistency checks.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        let e = &self.estimator;
        let scheme = e.scheme.name();
        if m.state_dim == 0 {
            return fail("model.state_dim must be positive".into());
        }
        if m.name == ModelName::Lorenz96 && m.state_dim < 4 {
            return fail("lorenz96 needs state_dim ≥ 4".into());
        }
        if !(m.step_size > 0.0) || !(m.forecast_horizon >= m.step_size) {
            return fail("need 0 < step_size ≤ forecast_horizon".into());
        }
        let ratio = m.forecast_horizon / m.step_size;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return fail("forecast_horizon must be a multiple of step_size".into());
        }
        if let Some(a) = &m.matrix {
            if m.name != ModelName::Linear {
                return fail("model.matrix is only valid for the linear model".into());
            }
            if a.len() != m.state_dim || a.iter().any(|row| row.len() != m.state_dim) {
                return fail(format!("model.matrix must be {0}×{0}", m.state_dim));
            }
        }
        if m.model_error_scale < 0.0 || (m.model_error_scale > 0.0 && m.name != ModelName::Linear) {
            return fail("model_error_scale must be non-negative and is only valid for the linear model".into());
        }
        let o = &self.observation;
        if !(o.r_scale >= 0.0) {
            return fail("observation.r_scale must be non-negative".into());
        }
        if let Some(c) = &o.components {
            if c.is_empty() || c.iter().any(|&i| i >= m.state_dim) {
                return fail("observation.components must be non-empty and within the state".into());
            }
        }
        match (o.operator, o.power) {
            (OperatorName::SignedPower, None) => return fail("signed_power needs observation.power".into()),
            (OperatorName::SignedPower, Some(_)) | (_, None) => {}
            (_, Some(_)) => return fail("observation.power only applies to signed_power".into()),
        }
        if e.scheme.is_ensemble() {
            match e.ensemble_size {
                Some(n) if n >= 2 => {}
                _ => return fail(format!("{scheme} needs ensemble_size ≥ 2")),
            }
        } else if e.ensemble_size.is_some() {
            return fail(format!("ensemble_size is not used by {scheme}"));
        }
        if e.scheme.is_windowed() {
            let lag = e.lag.ok_or_else(|| Error::Config(format!("{scheme} needs lag")))?;
            let shift = e.shift.unwrap_or(lag);
            if lag == 0 || shift == 0 || shift > lag {
                return fail(format!("{scheme} needs 1 ≤ shift ≤ lag"));
            }
            if e.scheme == Scheme::FourDVar && shift != lag {
                return fail("4dvar cycles with shift = lag".into());
            }
        } else if e.lag.is_some() || e.shift.is_some() {
            return fail(format!("lag and shift are not used by {scheme}"));
        }
        if e.filter.is_some() && !matches!(e.scheme, Scheme::Enks | Scheme::Sienks) {
            return fail("estimator.filter only applies to enks and sienks".into());
        }
        if e.random_rotation && !e.scheme.is_ensemble() {
            return fail("random_rotation only applies to ensemble schemes".into());
        }
        if !(e.inflation >= 1.0) || !e.inflation.is_finite() {
            return fail("inflation must be ≥ 1".into());
        }
        if !(e.prior_scale > 0.0) || !(e.climatology_scale > 0.0) {
            return fail("prior_scale and climatology_scale must be positive".into());
        }
        let t = &e.tolerances;
        if !(t.weight_tol > 0.0) || t.max_iter == 0 || !(t.epsilon > 0.0) || !(t.cg_tol > 0.0) || t.outer_iters == 0 {
            return fail("tolerances must be positive".into());
        }
        let daml_only = e.features.is_some() || e.q_scale.is_some() || e.adaptive_q;
        if daml_only && e.scheme != Scheme::Daml {
            return fail("features, q_scale and adaptive_q only apply to daml".into());
        }
        if let Some(q) = e.q_scale {
            if !(q > 0.0) {
                return fail("q_scale must be positive".into());
            }
        }
        let linear_obs = o.operator == OperatorName::Identity || o.power == Some(1.0);
        if e.scheme == Scheme::Kf && (m.name != ModelName::Linear || !linear_obs) {
            return fail("kf needs the linear model and a linear observation operator".into());
        }
        if self.run.scored_cycles == 0 {
            return fail("run.scored_cycles must be positive".into());
        }
        Ok(())
    }

    /// Zero `r_scale` is allowed for truth generation only.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate()?;
        if !(self.observation.r_scale > 0.0) {
            return Err(Error::Config("running an estimator needs r_scale > 0".into()));
        }
        Ok(())
    }

    pub fn lag(&self) -> usize {
        self.estimator.lag.unwrap_or(0)
    }

    pub fn shift(&self) -> usize {
        self.estimator.shift.or(self.estimator.lag).unwrap_or(1)
    }

    pub fn total_cycles(&self) -> usize {
        self.run.spinup_cycles + self.run.scored_cycles
    }

    /// Observation times consumed by a full run.
    pub fn observation_count(&self) -> usize {
        let cycles = self.total_cycles();
        if matches!(self.estimator.scheme, Scheme::Enks | Scheme::Ienks | Scheme::Sienks) {
            self.lag() + (cycles - 1) * self.shift()
        } else if self.estimator.scheme == Scheme::FourDVar {
            cycles * self.lag()
        } else {
            cycles
        }
    }
}

/// One concrete run of a (possibly gridded) configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    /// `key=value` pairs of this grid point, empty without a grid.
    pub label: String,
    pub config: ExperimentConfig,
}

/// Expands the optional `[grid]` table into the Cartesian product of runs.
///
/// Grid keys are dotted paths into the configuration
/// (`"estimator.inflation"`), each mapping to a list of values.
pub fn expand_grid(text: &str) -> Result<Vec<GridPoint>> {
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let grid = match root.remove("grid") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(Error::Config("[grid] must be a table".into())),
    };
    let mut points = vec![(String::new(), root)];
    for (key, values) in grid {
        let values = match values {
            toml::Value::Array(v) if !v.is_empty() => v,
            _ => return Err(Error::Config(format!("grid.{key} must be a non-empty list"))),
        };
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (label, table) in &points {
            for value in &values {
                let mut t = table.clone();
                set_path(&mut t, &key, value.clone())?;
                let entry = format!("{key}={value}");
                let label = if label.is_empty() { entry } else { format!("{label},{entry}") };
                next.push((label, t));
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|(label, table)| {
            let config: ExperimentConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("{label}: {e}")))?;
            config.validate()?;
            Ok(GridPoint { label, config })
        })
        .collect()
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        current = match current.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("grid key {path} does not name a table field"))),
        };
    }
    Err(Error::Config("empty grid key".into()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let points = expand_grid(&text)?;
    match points.as_slice() {
        [single] if single.label.is_empty() => Ok(single.config.clone()),
        _ => Err(Error::Config("configuration has a [grid]; use the grid command".into())),
    }
}

pub fn load_grid(path: &Path) -> Result<Vec<GridPoint>> {
    expand_grid(&std::fs::read_to_string(path)?)
}
