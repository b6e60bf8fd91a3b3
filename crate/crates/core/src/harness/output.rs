//! Result tables: per-cycle CSV and a JSON summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::Vector;

use super::run::{RunResult, ScoreSeries};

/// `cycle,forecast_rmse,analysis_rmse,smoother_rmse_lag0..,spread,model_calls,iterations`
pub fn csv_header(lag: usize) -> String {
    let mut h = String::from("cycle,forecast_rmse,analysis_rmse");
    for l in 0..=lag {
        write!(h, ",smoother_rmse_lag{l}").expect("writing to a String");
    }
    h.push_str(",spread,model_calls,iterations");
    h
}

/// Floats with 17 significant digits, so values round-trip exactly.
fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn series_to_csv(series: &ScoreSeries) -> String {
    let mut out = csv_header(series.lag);
    out.push('\n');
    for row in &series.rows {
        let mut fields = vec![row.cycle.to_string(), float(row.forecast_rmse), float(row.analysis_rmse)];
        fields.extend(row.smoother_rmse.iter().map(|&v| float(v)));
        fields.push(float(row.spread));
        fields.push(row.model_calls.to_string());
        fields.push(row.iterations.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Time means over the scored cycles that completed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub scheme: String,
    pub seed: u64,
    pub label: String,
    pub scored_cycles_requested: usize,
    pub scored_cycles_completed: usize,
    pub mean_forecast_rmse: Option<f64>,
    pub mean_analysis_rmse: Option<f64>,
    pub mean_smoother_rmse: Vec<Option<f64>>,
    pub mean_spread: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub total_model_calls: u64,
    pub divergence_threshold: f64,
    pub diverged: bool,
    pub failure: Option<String>,
}

impl RunSummary {
    pub fn new(result: &RunResult, label: &str) -> Self {
        let s = &result.series;
        Self {
            scheme: result.config.estimator.scheme.name().to_string(),
            seed: result.config.run.seed,
            label: label.to_string(),
            scored_cycles_requested: result.config.run.scored_cycles,
            scored_cycles_completed: s.len(),
            mean_forecast_rmse: s.mean_forecast_rmse(),
            mean_analysis_rmse: s.mean_analysis_rmse(),
            mean_smoother_rmse: (0..=s.lag).map(|l| s.mean_smoother_rmse(l)).collect(),
            mean_spread: s.mean_spread(),
            mean_iterations: s.mean_iterations(),
            total_model_calls: s.total_model_calls(),
            divergence_threshold: result.divergence_threshold,
            diverged: result.diverged(),
            failure: result.failure.as_ref().map(|e| e.to_string()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir` and returns their paths.
pub fn write_run(dir: &Path, stem: &str, result: &RunResult, label: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&csv, series_to_csv(&result.series))?;
    std::fs::write(&json, RunSummary::new(result, label).to_json()? + "\n")?;
    Ok((csv, json))
}

fn vectors_to_csv(prefix: &str, first_time: usize, vectors: impl Iterator<Item = Vector>) -> String {
    let mut out = String::new();
    for (k, v) in vectors.enumerate() {
        if k == 0 {
            out.push_str("time");
            for i in 0..v.len() {
                write!(out, ",{prefix}{i}").expect("writing to a String");
            }
            out.push('\n');
        }
        out.push_str(&(first_time + k).to_string());
        for x in v.iter() {
            out.push(',');
            out.push_str(&float(*x));
        }
        out.push('\n');
    }
    out
}

/// Writes `<stem>_truth.csv` (times `0..K`) and `<stem>_obs.csv` (`1..K`).
pub fn write_truth(dir: &Path, stem: &str, truth: &Trajectory, obs: &[Vector]) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let truth_path = dir.join(format!("{stem}_truth.csv"));
    let obs_path = dir.join(format!("{stem}_obs.csv"));
    std::fs::write(&truth_path, vectors_to_csv("x", 0, truth.states.iter().map(|s| s.values.clone())))?;
    std::fs::write(&obs_path, vectors_to_csv("y", 1, obs.iter().cloned()))?;
    Ok((truth_path, obs_path))
}
