use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dalab::harness::{
    expand_grid, generate_truth_and_obs, run_experiment, run_grid, write_run, write_truth, ExperimentConfig, GridPoint,
    RunResult,
};
use dalab::Error;

#[derive(Parser)]
#[command(name = "dalab", version, about = "Twin experiments for data assimilation schemes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed of every run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for result files.
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment and write its CSV and JSON summary.
    Run { config: PathBuf },
    /// Run every point of the configuration's [grid] concurrently.
    Grid { config: PathBuf },
    /// Check a configuration (and its grid) without running it.
    Validate { config: PathBuf },
    /// Write the truth trajectory and observations only.
    Truth { config: PathBuf },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn load(path: &Path, seed: Option<u64>) -> anyhow::Result<Vec<GridPoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = expand_grid(&text)?;
    if let Some(seed) = seed {
        for p in &mut points {
            p.config.run.seed = seed;
        }
    }
    Ok(points)
}

fn single(points: Vec<GridPoint>) -> anyhow::Result<ExperimentConfig> {
    match <[GridPoint; 1]>::try_from(points) {
        Ok([p]) if p.label.is_empty() => Ok(p.config),
        _ => Err(Error::Config("configuration has a [grid]; use the grid command".into()).into()),
    }
}

fn report(cli: &Cli, stem: &str, label: &str, result: &RunResult) -> anyhow::Result<u8> {
    let (csv, json) = write_run(&cli.out_dir, stem, result, label)?;
    if let Some(e) = &result.failure {
        eprintln!("{stem}: {e} (partial output in {})", csv.display());
        return Ok(EXIT_DIVERGED);
    }
    if !cli.quiet {
        let rmse = result.series.mean_analysis_rmse().unwrap_or(f64::NAN);
        let spread = result.series.mean_spread().unwrap_or(f64::NAN);
        println!("{stem}: analysis RMSE {rmse:.4}, spread {spread:.4} -> {}, {}", csv.display(), json.display());
    }
    Ok(0)
}

fn execute(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Validate { config } => {
            let points = load(config, cli.seed)?;
            for p in &points {
                p.config.validate_for_run()?;
            }
            if !cli.quiet {
                println!("{}: {} run(s) valid", config.display(), points.len());
            }
            Ok(0)
        }
        Command::Truth { config } => {
            let cfg = single(load(config, cli.seed)?)?;
            let (truth, obs) = generate_truth_and_obs(&cfg, cfg.run.seed)?;
            let (t, o) = write_truth(&cli.out_dir, &stem(config), &truth, &obs)?;
            if !cli.quiet {
                println!("wrote {} and {}", t.display(), o.display());
            }
            Ok(0)
        }
        Command::Run { config } => {
            let cfg = single(load(config, cli.seed)?)?;
            let result = run_experiment(&cfg)?;
            report(cli, &stem(config), "", &result)
        }
        Command::Grid { config } => {
            let points = load(config, cli.seed)?;
            let base = stem(config);
            let mut code = 0;
            for (i, (point, result)) in points.iter().zip(run_grid(&points)).enumerate() {
                let name = format!("{base}_{i:03}");
                let status = match result {
                    Ok(result) => report(cli, &name, &point.label, &result)?,
                    Err(e) => {
                        eprintln!("{name} ({}): {e}", point.label);
                        exit_code(&e.into())
                    }
                };
                code = code.max(status);
            }
            Ok(code)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::FilterDivergence { .. } | Error::NonFiniteState) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
