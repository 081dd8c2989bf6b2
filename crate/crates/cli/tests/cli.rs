use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use spdegp::grid::read_space_time;
use spdegp::oracle::{dense_marginal_variances, dense_posterior_precision};
use spdegp::params::ParamFields;
use spdegp::precision::{build_joint_precision, build_p0_precision, P0Mode};
use spdegp::operator::Scheme;
use spdegp::{Grid2D, ObsSet, Observation};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spdegp")).args(args).output().expect("binary runs")
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn simulate(dir: &TempDir, name: &str, extra: &[&str]) -> Value {
    let out = path(dir, name);
    let mut args = vec!["simulate", "--out", &out];
    args.extend_from_slice(extra);
    summary(&run(&args))
}

#[test]
fn simulate_preset_writes_finite_frames() {
    let dir = TempDir::new().unwrap();
    let s = simulate(&dir, "sim", &["--nx", "24", "--ny", "24", "--steps", "60"]);
    assert_eq!(s["frames"], 60);
    assert_eq!(s["finite"], true);
    let truth = read_space_time(&dir.path().join("sim/truth")).unwrap();
    assert_eq!(truth.grid.n_steps, 60);
    assert!(truth.as_slice().iter().all(|v| v.is_finite()));
    assert_eq!(s["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    simulate(&dir, "a", &["--nx", "8", "--ny", "8", "--seed", "3"]);
    simulate(&dir, "b", &["--nx", "8", "--ny", "8", "--seed", "3"]);
    for file in ["truth.bin", "truth.json", "summary.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn cfl_violation_is_advisory() {
    let dir = TempDir::new().unwrap();
    let s = simulate(&dir, "sim", &["--nx", "8", "--ny", "8", "--theta", "uniform", "--alpha", "2", "--m1", "2.5"]);
    assert_eq!(s["stability"]["ok"], false);
    assert!(s["warnings"][0].as_str().unwrap().contains("Courant"));
}

#[test]
fn full_observation_recovers_truth() {
    let dir = TempDir::new().unwrap();
    simulate(&dir, "sim", &["--nx", "6", "--ny", "6", "--steps", "3"]);
    let truth = path(&dir, "sim/truth");
    let out = path(&dir, "oi");
    let s = summary(&run(&["interpolate", "--truth", &truth, "--obs", "full", "--obs-noise", "1e-10", "--out", &out]));
    assert!(s["rmse"].as_f64().unwrap() <= 1e-3, "{}", s["rmse"]);
}

#[test]
fn masked_interpolation_beats_background() {
    let dir = TempDir::new().unwrap();
    simulate(&dir, "sim", &["--nx", "16", "--ny", "16", "--steps", "6"]);
    let truth = path(&dir, "sim/truth");
    let out = path(&dir, "oi");
    let s = summary(&run(&["interpolate", "--truth", &truth, "--track-spacing", "6", "--out", &out]));
    assert!(s["rmse"].as_f64().unwrap() < s["background_rmse"].as_f64().unwrap());
    assert!(s["coverage"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("oi/xstar.bin").exists());
}

#[test]
fn gradient_solver_matches_direct() {
    let dir = TempDir::new().unwrap();
    let common = ["--theta", "uniform", "--alpha", "2", "--kappa", "0.7", "--nx", "8", "--ny", "8", "--steps", "4"];
    let mut args: Vec<&str> = common.to_vec();
    let sim = path(&dir, "sim");
    args.extend(["--out", &sim]);
    let mut sim_args = vec!["simulate"];
    sim_args.extend(&args);
    summary(&run(&sim_args));
    let truth = path(&dir, "sim/truth");
    let (d, g) = (path(&dir, "d"), path(&dir, "g"));
    for (out, solver) in [(&d, "direct"), (&g, "gradient")] {
        let mut a = vec!["interpolate", "--truth", &truth, "--track-spacing", "5", "--solver", solver, "--out", out];
        a.extend(common);
        summary(&run(&a));
    }
    let xd = read_space_time(&dir.path().join("d/xstar")).unwrap();
    let xg = read_space_time(&dir.path().join("g/xstar")).unwrap();
    let num: f64 = xd.as_slice().iter().zip(xg.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = xd.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num / den <= 1e-3, "{}", num / den);
}

#[test]
fn missing_obs_file_names_path() {
    let out = run(&["interpolate", "--obs", "file", "--obs-path", "/nonexistent/obs"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/obs"));
}

#[test]
fn ensemble_smoke_and_seed_behaviour() {
    let dir = TempDir::new().unwrap();
    simulate(&dir, "sim", &["--nx", "6", "--ny", "6", "--steps", "3"]);
    let truth = path(&dir, "sim/truth");
    let (a, b) = (path(&dir, "a"), path(&dir, "b"));
    let sa = summary(&run(&["ensemble", "--truth", &truth, "--track-spacing", "4", "--members", "2", "--seed", "1", "--out", &a]));
    let sb = summary(&run(&["ensemble", "--truth", &truth, "--track-spacing", "4", "--members", "2", "--seed", "2", "--out", &b]));
    for name in ["ens_mean", "ens_std", "crps", "xstar", "obs_mask"] {
        assert!(dir.path().join(format!("a/{name}.bin")).exists(), "{name} missing");
    }
    assert_eq!(sa["config_hash"], sb["config_hash"]);
    let ma = fs::read(dir.path().join("a/ens_mean.bin")).unwrap();
    let mb = fs::read(dir.path().join("b/ens_mean.bin")).unwrap();
    assert_ne!(ma, mb);
    assert!(run(&["ensemble", "--members", "1"]).status.code() == Some(2));
}

#[test]
fn ensemble_spread_matches_dense_posterior() {
    let dir = TempDir::new().unwrap();
    let model = ["--theta", "uniform", "--alpha", "2", "--kappa", "0.8", "--nx", "4", "--ny", "4", "--steps", "3", "--p0-stab", "100"];
    let sim = path(&dir, "sim");
    let mut args = vec!["simulate", "--out", &sim];
    args.extend(model);
    summary(&run(&args));
    let truth = path(&dir, "sim/truth");
    let ens = path(&dir, "ens");
    let mut args = vec!["ensemble", "--truth", &truth, "--obs", "full", "--obs-noise", "0.5", "--members", "200", "--out", &ens];
    args.extend(model);
    summary(&run(&args));

    let grid = Grid2D::unit(4, 4, 3).unwrap();
    let params = ParamFields::isotropic(grid, 0.8, 1.0, 1.0, 2).unwrap();
    let p0 = build_p0_precision(&params, Scheme::Ufdm1, P0Mode::Recursion { n_stab: 100 }).unwrap();
    let q = build_joint_precision(&params, Scheme::Ufdm1, &p0).unwrap().q;
    let obs = ObsSet::new(grid, (0..48).map(|index| Observation { index, value: 0.0, noise_var: 0.5 }).collect()).unwrap();
    let sd: Vec<f64> = dense_marginal_variances(&dense_posterior_precision(&q.to_dense(), &obs)).unwrap().iter().map(|v| v.sqrt()).collect();
    let std = read_space_time(&dir.path().join("ens/ens_std")).unwrap();
    let num: f64 = std.as_slice().iter().zip(&sd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = sd.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(num / den <= 0.10, "relative std-map error {}", num / den);
}

#[test]
fn fit_recovers_kappa() {
    let dir = TempDir::new().unwrap();
    let sim = path(&dir, "sim");
    summary(&run(&[
        "simulate", "--theta", "uniform", "--kappa", "0.33", "--alpha", "4", "--p0", "innovation", "--nx", "16", "--ny", "16", "--steps", "6", "--seed", "8", "--out", &sim,
    ]));
    let truth = path(&dir, "sim/truth");
    let out = path(&dir, "fit");
    let s = summary(&run(&[
        "fit", "--truth", &truth, "--obs", "none", "--lambda-mix", "inf", "--fit-active", "kappa", "--fit-iters", "100", "--alpha", "4", "--out", &out,
    ]));
    let kappa = s["theta_means"]["kappa"].as_f64().unwrap();
    assert!((kappa - 0.33).abs() / 0.33 <= 0.2, "kappa {kappa}");
    assert!(dir.path().join("fit/fit_report.json").exists());
    assert!(dir.path().join("fit/theta/kappa.bin").exists());
}

#[test]
fn fit_with_zero_iterations_echoes_start() {
    let dir = TempDir::new().unwrap();
    simulate(&dir, "sim", &["--nx", "5", "--ny", "5", "--steps", "3"]);
    let truth = path(&dir, "sim/truth");
    let out = path(&dir, "fit");
    let s = summary(&run(&["fit", "--truth", &truth, "--fit-iters", "0", "--fit-init", "0.7,0,0,1.2,0.5,0,0,0.9", "--track-spacing", "4", "--out", &out]));
    assert_eq!(s["iterations"], 0);
    let means = &s["theta_means"];
    assert!((means["kappa"].as_f64().unwrap() - 0.7).abs() < 1e-9);
    assert!((means["gamma"].as_f64().unwrap() - 1.2).abs() < 1e-9);
    assert!(s["initial_loss"]["l1"].is_number());
    assert!(s["initial_loss"]["l2"].is_number());
    assert_eq!(s["initial_loss"], s["final_loss"]);
}

#[test]
fn negative_lambda_mix_is_rejected() {
    let out = run(&["fit", "--lambda-mix", "-0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_mix"));
}

#[test]
fn score_of_truth_is_perfect() {
    let dir = TempDir::new().unwrap();
    simulate(&dir, "sim", &["--nx", "6", "--ny", "6", "--steps", "4"]);
    let truth = path(&dir, "sim/truth");
    let out = path(&dir, "score");
    let s = summary(&run(&["score", "--truth", &truth, "--estimate", &truth, "--test-range", "1..3", "--out", &out]));
    assert_eq!(s["rmse"], 0.0);
    assert_eq!(s["frames"], serde_json::json!([1, 3]));
}

#[test]
fn oracle_check_passes_on_tiny_instance() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "oc");
    let s = summary(&run(&["oracle-check", "--nx", "5", "--ny", "4", "--steps", "3", "--out", &out]));
    assert_eq!(s["all_passed"], true);
    let names: Vec<&str> = s["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for n in ["precision_assembly", "oi_duality", "logdet", "solve_backward", "cholesky_backward", "logdet_gradient"] {
        assert!(names.contains(&n), "{n}");
    }
}

#[test]
fn corrupted_precision_fails_assembly_check() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "oc");
    let res = run(&["oracle-check", "--nx", "4", "--ny", "4", "--steps", "3", "--corrupt", "asymmetry", "--out", &out]);
    assert_eq!(res.status.code(), Some(3));
    let report: Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("oracle_report.json")).unwrap()).unwrap();
    let assembly = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "precision_assembly").unwrap();
    assert_eq!(assembly["passed"], false);
}

#[test]
fn oracle_check_refuses_large_instances() {
    let res = run(&["oracle-check", "--nx", "128", "--ny", "128", "--steps", "11"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("cap"));
    let res = run(&["oracle-check", "--nx", "4", "--ny", "4", "--steps", "3", "--oracle-cap", "10"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nnx = 5\nny = 5\nsteps = 2\nseed = 4\n").unwrap();
    let out = path(&dir, "sim");
    let s = summary(&run(&["simulate", "--config", cfg.to_str().unwrap(), "--steps", "3", "--out", &out]));
    assert_eq!(s["frames"], 3);
    assert_eq!(s["nodes"], 25);
    assert_eq!(s["seed"], 4);
    fs::write(&cfg, "nx = 5\nmystery = 1\n").unwrap();
    let res = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("mystery"));
}
