//! Twin experiments driven by a configuration file.

mod config;
mod output;
mod run;

use rayon::prelude::*;

pub use config::{
    expand_grid, load_config, load_grid, EstimatorSpec, ExperimentConfig, GridPoint, ModelName, ModelSpec,
    ObservationSpec, OperatorName, RunSpec, Scheme, SmootherFilter, Tolerances,
};
pub use output::{csv_header, series_to_csv, write_run, write_truth, RunSummary};
pub use run::{
    build_model, build_observation, generate_truth_and_obs, run_experiment, score_rmse, RunResult, ScoreRow,
    ScoreSeries, DEFAULT_DAML_Q,
};

use crate::error::Result;

/// Runs every grid point concurrently; results keep the grid order.
pub fn run_grid(points: &[GridPoint]) -> Vec<Result<RunResult>> {
    points.par_iter().map(|p| run_experiment(&p.config)).collect()
}
