use std::process::Command;

use dalab::harness::{expand_grid, run_experiment, run_grid, series_to_csv, ExperimentConfig};
use dalab::{Matrix, Vector};
use nalgebra::Cholesky;

fn l96_config(estimator: &str, spinup: usize, scored: usize) -> ExperimentConfig {
    let text = format!(
        r#"
[model]
name = "lorenz96"
state_dim = 40

[observation]
operator = "identity"
r_scale = 1.0

[estimator]
{estimator}

[run]
spinup_cycles = {spinup}
scored_cycles = {scored}
seed = 5
"#
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

/// RK4 amplification polynomial of `h A`, applied `substeps` times.
fn rk4_resolvent(a: &Matrix, h: f64, substeps: usize) -> Matrix {
    let n = a.nrows();
    let ha = a * h;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ha4 = &ha3 * &ha;
    let step = Matrix::identity(n, n) + &ha + ha2 / 2.0 + ha3 / 6.0 + ha4 / 24.0;
    (0..substeps).fold(Matrix::identity(n, n), |m, _| &step * m)
}

fn spd_inverse(m: &Matrix) -> Matrix {
    Cholesky::new(m.clone()).unwrap().inverse()
}

#[test]
fn kf_rmse_matches_riccati_fixed_point() {
    let (n, q, r, damping, advection) = (40, 0.05, 0.5, 0.1, 0.5);
    let text = format!(
        r#"
[model]
name = "linear"
state_dim = {n}
damping = {damping}
advection = {advection}
model_error_scale = {q}
truth_spinup = 200

[observation]
operator = "identity"
r_scale = {r}

[estimator]
scheme = "kf"

[run]
spinup_cycles = 200
scored_cycles = 5000
seed = 17
"#
    );
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let series = run_experiment(&cfg).unwrap().into_result().unwrap();

    let mut a = Matrix::identity(n, n) * -damping;
    for i in 0..n {
        a[(i, (i + 1) % n)] += advection;
        a[(i, (i + n - 1) % n)] -= advection;
    }
    let m = rk4_resolvent(&a, 0.01, 5);
    let eye = Matrix::identity(n, n);
    let mut ba = eye.clone();
    for _ in 0..2000 {
        let bf = &m * &ba * m.transpose() + &eye * q;
        ba = spd_inverse(&(spd_inverse(&bf) + &eye / r));
    }
    let predicted = (ba.trace() / n as f64).sqrt();
    let achieved = series.mean_analysis_rmse().unwrap();
    assert!((achieved / predicted - 1.0).abs() < 0.05, "achieved {achieved}, predicted {predicted}");
    let spread = series.mean_spread().unwrap();
    assert!((spread / predicted - 1.0).abs() < 1e-6, "spread {spread}, predicted {predicted}");
}

#[test]
fn etkf_spread_tracks_rmse() {
    let cfg = l96_config("scheme = \"etkf\"\nensemble_size = 20\ninflation = 1.04", 200, 800);
    let series = run_experiment(&cfg).unwrap().into_result().unwrap();
    let ratio = series.mean_spread().unwrap() / series.mean_analysis_rmse().unwrap();
    assert!(ratio > 0.3 && ratio < 3.0, "spread/RMSE = {ratio}");
    assert!(series.mean_analysis_rmse().unwrap() < 0.5);
    assert!(series.iterations().iter().all(|&i| i == 1));
}

#[test]
fn smoother_model_call_accounting() {
    let run = |scheme: &str, shift: usize| {
        let est = format!("scheme = \"{scheme}\"\nensemble_size = 10\ninflation = 1.05\nlag = 3\nshift = {shift}");
        run_experiment(&l96_config(&est, 5, 30)).unwrap().into_result().unwrap()
    };
    // One sweep of L intervals: L · N_e · substeps.
    let sweep = 3 * 10 * 5;
    let (enks, sienks, ienks) = (run("enks", 3), run("sienks", 3), run("ienks", 3));
    for ((e, s), i) in enks.rows.iter().zip(&sienks.rows).zip(&ienks.rows) {
        assert_eq!(e.model_calls, sweep);
        assert_eq!(s.model_calls, e.model_calls);
        assert_eq!(i.model_calls % sweep, 0);
        assert!(i.model_calls >= 2 * sweep);
    }
    assert!(ienks.total_model_calls() > sienks.total_model_calls());
    // With S < L the EnKS forecasts S intervals and the SIEnKS still sweeps L.
    let (enks, sienks) = (run("enks", 1), run("sienks", 1));
    for (e, s) in enks.rows.iter().zip(&sienks.rows) {
        assert_eq!(e.model_calls, 10 * 5);
        assert_eq!(s.model_calls, sweep);
    }
}

#[test]
fn smoothing_improves_on_filtering_with_lag() {
    let cfg = l96_config("scheme = \"ienks\"\nensemble_size = 20\ninflation = 1.02\nlag = 4\nshift = 1", 100, 400);
    let series = run_experiment(&cfg).unwrap().into_result().unwrap();
    let means: Vec<f64> = (0..=4).map(|l| series.mean_smoother_rmse(l).unwrap()).collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
}

#[test]
fn grid_runs_match_individual_runs() {
    let base = l96_config("scheme = \"etkf\"\nensemble_size = 10\ninflation = 1.05", 10, 20);
    let text = format!("{}\n[grid]\n\"estimator.inflation\" = [1.05, 1.1]\n", base.to_toml_string().unwrap());
    let points = expand_grid(&text).unwrap();
    let results = run_grid(&points);
    assert_eq!(results.len(), 2);
    for (p, r) in points.iter().zip(results) {
        let direct = run_experiment(&p.config).unwrap();
        assert_eq!(series_to_csv(&r.unwrap().series), series_to_csv(&direct.series));
    }
}

#[test]
fn rmse_is_zero_when_estimate_is_truth() {
    let v = Vector::from_vec(vec![0.5, -1.0, 2.0]);
    assert_eq!(dalab::harness::score_rmse(&v, &v).unwrap(), 0.0);
}

fn write_config(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn cli_runs_are_byte_identical_and_exit_codes_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = l96_config("scheme = \"etkf\"\nensemble_size = 10\ninflation = 1.05", 10, 50);
    let path = write_config(dir.path(), "exp.toml", &cfg.to_toml_string().unwrap());
    let bin = env!("CARGO_BIN_EXE_dalab");
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let out_dir = dir.path().join(out);
        let status = Command::new(bin)
            .args(["run", path.to_str().unwrap(), "--quiet", "--out-dir", out_dir.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out_dir.join("exp.csv")).unwrap());
        let summary: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out_dir.join("exp.json")).unwrap()).unwrap();
        assert_eq!(summary["scored_cycles_completed"], 50);
        assert_eq!(summary["diverged"], false);
    }
    assert_eq!(csvs[0], csvs[1]);
    let lines = String::from_utf8(csvs[0].clone()).unwrap();
    assert_eq!(lines.lines().count(), 51);

    let seeded = dir.path().join("seeded");
    let status = Command::new(bin)
        .args(["run", path.to_str().unwrap(), "--quiet", "--seed", "99", "--out-dir", seeded.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    assert_ne!(std::fs::read(seeded.join("exp.csv")).unwrap(), csvs[0]);

    let bad = write_config(dir.path(), "bad.toml", &cfg.to_toml_string().unwrap().replace("etkf", "kf"));
    let status = Command::new(bin).args(["validate", bad.to_str().unwrap(), "--quiet"]).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let grid_text = format!("{}\n[grid]\n\"run.seed\" = [1, 2, 3]\n", cfg.to_toml_string().unwrap());
    let grid = write_config(dir.path(), "sweep.toml", &grid_text);
    let out_dir = dir.path().join("grid");
    let status = Command::new(bin)
        .args(["grid", grid.to_str().unwrap(), "--quiet", "--out-dir", out_dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    for i in 0..3 {
        assert!(out_dir.join(format!("sweep_{i:03}.csv")).exists());
    }
    let status = Command::new(bin).args(["run", grid.to_str().unwrap(), "--quiet"]).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let truth_dir = dir.path().join("truth");
    let status = Command::new(bin)
        .args(["truth", path.to_str().unwrap(), "--quiet", "--out-dir", truth_dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let truth = std::fs::read_to_string(truth_dir.join("exp_truth.csv")).unwrap();
    let obs = std::fs::read_to_string(truth_dir.join("exp_obs.csv")).unwrap();
    assert_eq!(truth.lines().count(), 62);
    assert_eq!(obs.lines().count(), 61);
}
