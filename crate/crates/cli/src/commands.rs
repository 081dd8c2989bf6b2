use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use spdegp::engine::{gradient_descent_solve, optimal_interpolate, sample_from_precision_rng, PriorSimulator, SolverConfig, StepRule};
use spdegp::ensemble::{crps_map, ensemble_stats, member_rng, nrmse, rmse, Conditioner, Ensemble};
use spdegp::fit::{fit_parameters, CoarseParamGrid, FitConfig, FitProblem, LossWeights, ModelConfig};
use spdegp::grid::{make_track_mask, read_masks, read_space_time, write_masks, write_space_time, TrackConfig};
use spdegp::oracle::{covariance_oi, dense_prior_precision};
use spdegp::params::{check_stability, init_from_field, ParamFields};
use spdegp::precision::{build_joint_precision, build_p0_precision, DENSE_CAP};
use spdegp::sparse::{cholesky_backward, solve_backward};
use spdegp::{CholeskyFactor, CsrMatrix, Grid2D, ObsSet, Observation, Ordering, SpaceTimeField};

use crate::config::{Corruption, ObsSource, RunConfig, Solver, StepRuleKind, ThetaSource};
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

fn config_grid(cfg: &RunConfig) -> CliResult<Grid2D> {
    Ok(Grid2D::new(cfg.nx, cfg.ny, cfg.dx, cfg.dy, cfg.dt, cfg.steps)?)
}

fn load_truth(cfg: &RunConfig) -> CliResult<Option<SpaceTimeField>> {
    cfg.truth.as_deref().map(read_space_time).transpose().map_err(CliError::from)
}

fn require_truth<'a>(truth: &'a Option<SpaceTimeField>, command: &str) -> CliResult<&'a SpaceTimeField> {
    truth.as_ref().ok_or_else(|| CliError::Config(format!("{command} needs a truth raster (truth = PATH)")))
}

/// The truth grid when a truth raster is given, otherwise the configured grid.
fn working_grid(cfg: &RunConfig, truth: &Option<SpaceTimeField>) -> CliResult<Grid2D> {
    match truth {
        Some(t) => Ok(t.grid),
        None => config_grid(cfg),
    }
}

fn load_params(cfg: &RunConfig, grid: Grid2D, truth: Option<&SpaceTimeField>) -> CliResult<ParamFields> {
    let base = match cfg.theta {
        ThetaSource::Preset => ParamFields::gp_preset(grid)?,
        ThetaSource::Uniform(v) => {
            let step = spdegp::params::StepParams::uniform(grid.n_nodes(), v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
            ParamFields::stationary(grid, step, cfg.alpha, cfg.noise)?
        }
        ThetaSource::Dir => ParamFields::read(cfg.theta_dir.as_deref().expect("validated"), grid)?,
        ThetaSource::Init => {
            let truth = truth.ok_or_else(|| CliError::Config("theta = init needs a truth raster".into()))?;
            init_from_field(&truth.frame_field(0), cfg.alpha, cfg.noise)?.with_grid(grid)?
        }
    };
    Ok(ParamFields::new(grid, base.steps, cfg.alpha, cfg.noise)?)
}

fn prior_precision(cfg: &RunConfig, params: &ParamFields) -> CliResult<CsrMatrix> {
    let p0 = build_p0_precision(params, cfg.scheme, cfg.p0)?;
    Ok(build_joint_precision(params, cfg.scheme, &p0)?.q)
}

fn background(cfg: &RunConfig, grid: Grid2D) -> CliResult<Vec<f64>> {
    match &cfg.background {
        None => Ok(vec![0.0; grid.n_total()]),
        Some(path) => {
            let b = read_space_time(path)?;
            if b.grid.n_total() != grid.n_total() {
                return Err(CliError::Config(format!("{}: background shape does not match the grid", path.display())));
            }
            Ok(b.into_vec())
        }
    }
}

fn build_obs(cfg: &RunConfig, grid: Grid2D, truth: Option<&SpaceTimeField>) -> CliResult<ObsSet> {
    let truth_for = |source: &str| truth.ok_or_else(|| CliError::Config(format!("obs = {source} needs a truth raster")));
    let masks = match cfg.obs {
        ObsSource::None => return Ok(ObsSet::empty(grid)),
        ObsSource::File => {
            let path = cfg.obs_path.as_deref().expect("validated");
            let values = read_space_time(path)?;
            if values.grid.n_total() != grid.n_total() {
                return Err(CliError::Config(format!("{}: observation raster shape does not match the grid", path.display())));
            }
            let obs = values
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(index, &value)| Observation { index, value, noise_var: cfg.obs_noise })
                .collect();
            return Ok(ObsSet::new(grid, obs)?);
        }
        ObsSource::Full => vec![vec![true; grid.n_nodes()]; grid.n_steps],
        ObsSource::Tracks => {
            truth_for("tracks")?;
            let tracks = TrackConfig {
                swath_width: cfg.track_width,
                spacing: cfg.track_spacing,
                angle_deg: cfg.track_angle,
                phase_per_step: cfg.track_phase,
                seed: cfg.seed,
            };
            make_track_mask(&grid, grid.n_steps, &tracks)?
        }
        ObsSource::Mask => {
            let (mgrid, masks) = read_masks(cfg.obs_path.as_deref().expect("validated"))?;
            if mgrid.n_nodes() != grid.n_nodes() || masks.len() != grid.n_steps {
                return Err(CliError::Config("mask raster shape does not match the grid".into()));
            }
            masks
        }
    };
    let source = if cfg.obs == ObsSource::Mask { "mask" } else { "full" };
    Ok(ObsSet::from_masks(truth_for(source)?, &masks, cfg.obs_noise, cfg.seed)?)
}

fn obs_masks(obs: &ObsSet) -> Vec<Vec<bool>> {
    (0..obs.grid.n_steps).map(|t| obs.mask(t)).collect()
}

fn write_raster(dir: &Path, name: &str, grid: Grid2D, values: Vec<f64>) -> CliResult<()> {
    write_space_time(&SpaceTimeField::new(grid, values)?, &dir.join(name))?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;
    let path = cfg.out.join("config.txt");
    fs::write(&path, cfg.to_text()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn summary_head(cfg: &RunConfig, command: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("command".into(), json!(command));
    m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("config_hash".into(), json!(cfg.hash()));
    m.insert("seed".into(), json!(cfg.seed));
    m
}

fn write_summary(cfg: &RunConfig, name: &str, summary: Map<String, Value>) -> CliResult<Value> {
    let value = Value::Object(summary);
    let path = cfg.out.join(name);
    let text = serde_json::to_string_pretty(&value).expect("summary serializes");
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(value)
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn simulate(cfg: &RunConfig) -> CliResult<Value> {
    let grid = config_grid(cfg)?;
    let params = load_params(cfg, grid, None)?;
    let stability = check_stability(&params)?;
    let mut warnings = Vec::new();
    if !stability.ok {
        warnings.push(format!("Courant number {:.3} exceeds 1; the upwind discretization may be inaccurate", stability.max_cfl));
    }
    if stability.peclet_warning {
        warnings.push(format!("cell Peclet number {:.3} is large; prefer an upwind scheme", stability.max_peclet));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let p0 = CholeskyFactor::factorize(&build_p0_precision(&params, cfg.scheme, cfg.p0)?, Ordering::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = sample_from_precision_rng(&p0, &vec![0.0; grid.n_nodes()], &mut rng)?;
    let x = PriorSimulator::new(&params, cfg.scheme)?.run(&x0, &mut rng)?;
    let finite = x.iter().all(|v| v.is_finite());
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    prepare_out(cfg)?;
    write_raster(&cfg.out, "truth", grid, x)?;
    params.write(&cfg.out.join("theta"))?;
    let mut s = summary_head(cfg, "simulate");
    s.insert("frames".into(), json!(grid.n_steps));
    s.insert("nodes".into(), json!(grid.n_nodes()));
    s.insert("finite".into(), json!(finite));
    s.insert("min".into(), finite_or_null(lo));
    s.insert("max".into(), finite_or_null(hi));
    s.insert("params_hash".into(), json!(params.hash()));
    s.insert("stability".into(), json!(stability));
    s.insert("warnings".into(), json!(warnings));
    write_summary(cfg, "summary.json", s)
}

fn scale_obs(obs: &ObsSet, lambda: f64) -> CliResult<ObsSet> {
    let scaled = obs.iter().map(|o| Observation { noise_var: o.noise_var / lambda, ..*o }).collect();
    Ok(ObsSet::new(obs.grid, scaled)?)
}

fn score_fields(s: &mut Map<String, Value>, grid: Grid2D, estimate: &[f64], truth: Option<&SpaceTimeField>, xb: &[f64]) -> CliResult<()> {
    if let Some(t) = truth {
        s.insert("rmse".into(), json!(rmse(estimate, t.as_slice())));
        s.insert("background_rmse".into(), json!(rmse(xb, t.as_slice())));
        let report = nrmse(&SpaceTimeField::new(grid, estimate.to_vec())?, t)?;
        s.insert("nrmse".into(), json!(report));
    }
    Ok(())
}

pub fn interpolate(cfg: &RunConfig) -> CliResult<Value> {
    let truth = load_truth(cfg)?;
    let grid = working_grid(cfg, &truth)?;
    let params = load_params(cfg, grid, truth.as_ref())?;
    let obs = build_obs(cfg, grid, truth.as_ref())?;
    let xb = background(cfg, grid)?;
    let q = prior_precision(cfg, &params)?;
    let mut s = summary_head(cfg, "interpolate");
    let x = match cfg.solver {
        Solver::Direct => optimal_interpolate(&q, &scale_obs(&obs, cfg.lambda)?, &xb)?.x,
        Solver::Gradient => {
            let rule = match cfg.step_rule {
                StepRuleKind::Fixed => StepRule::Fixed { eta: cfg.eta },
                StepRuleKind::Backtracking => StepRule::Backtracking { eta0: cfg.eta },
                StepRuleKind::Exact => StepRule::Exact,
            };
            let solver = SolverConfig { rule, n_iters: cfg.iters, ..SolverConfig::default() };
            let state = gradient_descent_solve(&obs, &q, &xb, cfg.lambda, &solver)?;
            s.insert("iterations".into(), json!(state.iterations));
            s.insert("grad_norm".into(), json!(state.grad_norm));
            s.insert("final_cost".into(), json!(state.cost_history.last()));
            state.x
        }
    };
    prepare_out(cfg)?;
    write_masks(&grid, &obs_masks(&obs), &cfg.out.join("obs_mask"))?;
    s.insert("solver".into(), json!(cfg.raw["solver"]));
    s.insert("observations".into(), json!(obs.len()));
    s.insert("coverage".into(), json!(obs.coverage()));
    score_fields(&mut s, grid, &x, truth.as_ref(), &xb)?;
    write_raster(&cfg.out, "xstar", grid, x)?;
    write_summary(cfg, "summary.json", s)
}

pub fn ensemble(cfg: &RunConfig) -> CliResult<Value> {
    let truth = load_truth(cfg)?;
    let grid = working_grid(cfg, &truth)?;
    let params = load_params(cfg, grid, truth.as_ref())?;
    let obs = build_obs(cfg, grid, truth.as_ref())?;
    let xb = background(cfg, grid)?;
    let q = prior_precision(cfg, &params)?;
    let prior = CholeskyFactor::factorize(&q, Ordering::default())?;
    let oi = optimal_interpolate(&q, &scale_obs(&obs, cfg.lambda)?, &xb)?;
    let cond = Conditioner { x_star: &oi.x, prior: &prior, posterior: &oi.posterior, xb: &xb };
    let ens = Ensemble::generate(&cond, cfg.members, cfg.seed)?;
    let stats = ensemble_stats(&ens.members)?;
    prepare_out(cfg)?;
    let mut s = summary_head(cfg, "ensemble");
    s.insert("members".into(), json!(ens.len()));
    s.insert("observations".into(), json!(obs.len()));
    s.insert("mean_std".into(), json!(stats.std.iter().sum::<f64>() / stats.std.len() as f64));
    if let Some(t) = &truth {
        let c = crps_map(&ens, t.as_slice())?;
        s.insert("mean_crps".into(), json!(c.iter().sum::<f64>() / c.len() as f64));
        s.insert("ensemble_mean_rmse".into(), json!(rmse(&stats.mean, t.as_slice())));
        write_raster(&cfg.out, "crps", grid, c)?;
    }
    score_fields(&mut s, grid, &oi.x, truth.as_ref(), &xb)?;
    write_masks(&grid, &obs_masks(&obs), &cfg.out.join("obs_mask"))?;
    write_raster(&cfg.out, "xstar", grid, oi.x)?;
    write_raster(&cfg.out, "ens_mean", grid, stats.mean)?;
    write_raster(&cfg.out, "ens_std", grid, stats.std)?;
    write_summary(cfg, "summary.json", s)
}

pub fn fit(cfg: &RunConfig) -> CliResult<Value> {
    let truth = load_truth(cfg)?;
    let truth = require_truth(&truth, "fit")?;
    let grid = truth.grid;
    let obs = build_obs(cfg, grid, Some(truth))?;
    let xb = background(cfg, grid)?;
    let theta0 = CoarseParamGrid::from_values(cfg.fit_p, cfg.fit_init)?;
    let problem = FitProblem {
        grid,
        model: ModelConfig { alpha: cfg.alpha, noise: cfg.noise, scheme: cfg.scheme },
        truth: truth.as_slice(),
        obs: &obs,
        xb: &xb,
        weights: LossWeights::mixed(cfg.lambda_mix)?,
        active: cfg.fit_active,
    };
    let fit_cfg = FitConfig { n_iters: cfg.fit_iters, lr0: cfg.lr, ..FitConfig::default() };
    let report = fit_parameters(&problem, &theta0, &fit_cfg)?;
    prepare_out(cfg)?;
    report.params.write(&cfg.out.join("theta"))?;
    let path = cfg.out.join("fit_report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut s = summary_head(cfg, "fit");
    s.insert("iterations".into(), json!(report.iterations));
    s.insert("converged".into(), json!(report.converged));
    s.insert("initial_loss".into(), json!(report.losses.first()));
    s.insert("final_loss".into(), json!(report.losses.last()));
    s.insert("theta_means".into(), json!(report.theta_means));
    write_summary(cfg, "summary.json", s)
}

fn frames(field: &SpaceTimeField, range: (usize, usize)) -> CliResult<SpaceTimeField> {
    let m = field.grid.n_nodes();
    let data = field.as_slice()[range.0 * m..range.1 * m].to_vec();
    Ok(SpaceTimeField::new(field.grid.with_steps(range.1 - range.0), data)?)
}

pub fn score(cfg: &RunConfig) -> CliResult<Value> {
    let truth = load_truth(cfg)?;
    let truth = require_truth(&truth, "score")?;
    let path = cfg.estimate.as_deref().ok_or_else(|| CliError::Config("score needs an estimate raster (estimate = PATH)".into()))?;
    let estimate = read_space_time(path)?;
    if estimate.grid.n_total() != truth.grid.n_total() {
        return Err(CliError::Config("estimate and truth shapes differ".into()));
    }
    let range = cfg.test_range.unwrap_or((0, truth.grid.n_steps));
    if range.1 > truth.grid.n_steps {
        return Err(CliError::Config(format!("test_range ends at {} but there are {} frames", range.1, truth.grid.n_steps)));
    }
    let (e, t) = (frames(&estimate, range)?, frames(truth, range)?);
    let report = nrmse(&e, &t)?;
    prepare_out(cfg)?;
    let mut s = summary_head(cfg, "score");
    s.insert("frames".into(), json!([range.0, range.1]));
    s.insert("rmse".into(), json!(rmse(e.as_slice(), t.as_slice())));
    s.insert("nrmse".into(), json!(report));
    write_summary(cfg, "summary.json", s)
}

struct Check {
    name: &'static str,
    value: Option<f64>,
    tolerance: f64,
    detail: String,
}

impl Check {
    fn new(name: &'static str, tolerance: f64, result: spdegp::Result<f64>) -> Self {
        match result {
            Ok(v) => Check { name, value: Some(v), tolerance, detail: String::new() },
            Err(e) => Check { name, value: None, tolerance, detail: e.to_string() },
        }
    }

    fn passed(&self) -> bool {
        self.value.is_some_and(|v| v <= self.tolerance)
    }

    fn to_json(&self) -> Value {
        json!({ "name": self.name, "passed": self.passed(), "value": self.value, "tolerance": self.tolerance, "detail": self.detail })
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

/// `B Bᵀ + c I` with a sparse random `B`.
fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> spdegp::Result<CsrMatrix> {
    let trip: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i == j || rng.gen_bool(0.2))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|(i, j)| (i, j, rng.gen_range(-1.0..1.0)))
        .collect();
    let b = CsrMatrix::from_triplets(n, n, &trip)?;
    b.matmul(&b.transpose())?.add(&CsrMatrix::identity(n).scaled(0.5 + rng.gen_range(0.0..1.0)))
}

/// Central difference of `f` under a symmetric perturbation of entry `(i, j)`.
fn entry_fd(a: &CsrMatrix, i: usize, j: usize, f: &dyn Fn(&CsrMatrix) -> spdegp::Result<f64>) -> spdegp::Result<f64> {
    let h = 1e-6;
    let pair = if i == j { vec![(i, i, 1.0)] } else { vec![(i, j, 1.0), (j, i, 1.0)] };
    let e = CsrMatrix::from_triplets(a.nrows(), a.ncols(), &pair)?;
    Ok((f(&a.add_scaled(1.0, &e, h)?)? - f(&a.add_scaled(1.0, &e, -h)?)?) / (2.0 * h))
}

/// Worst relative error of analytic entry gradients against finite
/// differences over `(analytic entry value, fd)` pairs from `probe`.
fn worst_over_matrices(seed: u64, stream: u64, probe: impl Fn(&CsrMatrix, &mut ChaCha8Rng) -> spdegp::Result<(Vec<f64>, Vec<f64>)>) -> spdegp::Result<f64> {
    let mut rng = member_rng(seed, stream);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(4..=16);
        let a = random_spd(n, &mut rng)?;
        let (analytic, fd) = probe(&a, &mut rng)?;
        worst = worst.max(rel_norm(&analytic, &fd));
    }
    Ok(worst)
}

/// Analytic gradient on the lower pattern, folding the symmetric pair.
fn folded(g: &CsrMatrix, i: usize, j: usize) -> f64 {
    if i == j {
        g.get(i, i)
    } else {
        g.get(i, j) + g.get(j, i)
    }
}

fn backward_checks(seed: u64) -> Vec<Check> {
    let solve = worst_over_matrices(seed, 1, |a, rng| {
        let n = a.nrows();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = CholeskyFactor::factorize(a, Ordering::default())?.solve(&b)?;
        let (_, ga) = solve_backward(a, &x, &w)?;
        let loss = |m: &CsrMatrix| -> spdegp::Result<f64> {
            let x = CholeskyFactor::factorize(m, Ordering::default())?.solve(&b)?;
            Ok(x.iter().zip(&w).map(|(x, w)| x * w).sum())
        };
        let mut out = (Vec::new(), Vec::new());
        for (i, j, _) in a.triplets().filter(|(i, j, _)| i >= j) {
            out.0.push(folded(&ga, i, j));
            out.1.push(entry_fd(a, i, j, &loss)?);
        }
        Ok(out)
    });
    let chol = worst_over_matrices(seed, 2, |a, rng| {
        let l = CholeskyFactor::factorize(a, Ordering::Natural)?.l_matrix();
        let lbar = l.with_data((0..l.nnz()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let abar = cholesky_backward(&l, &lbar)?;
        let loss = |m: &CsrMatrix| -> spdegp::Result<f64> {
            let lm = CholeskyFactor::factorize(m, Ordering::Natural)?.l_matrix();
            Ok(lm.values_on_pattern(&lbar).iter().zip(lbar.data()).map(|(a, b)| a * b).sum())
        };
        let mut out = (Vec::new(), Vec::new());
        for (i, j, _) in a.triplets().filter(|(i, j, _)| i >= j) {
            out.0.push(folded(&abar, i, j));
            out.1.push(entry_fd(a, i, j, &loss)?);
        }
        Ok(out)
    });
    let logdet = worst_over_matrices(seed, 3, |a, _| {
        let g = CholeskyFactor::factorize(a, Ordering::default())?.logdet_gradient(a)?;
        let loss = |m: &CsrMatrix| Ok(CholeskyFactor::factorize(m, Ordering::default())?.logdet());
        let mut out = (Vec::new(), Vec::new());
        for (i, j, _) in a.triplets().filter(|(i, j, _)| i >= j) {
            out.0.push(folded(&g, i, j));
            out.1.push(entry_fd(a, i, j, &loss)?);
        }
        Ok(out)
    });
    vec![
        Check::new("solve_backward", 1e-5, solve),
        Check::new("cholesky_backward", 1e-5, chol),
        Check::new("logdet_gradient", 1e-5, logdet),
    ]
}

pub fn oracle_check(cfg: &RunConfig) -> CliResult<Value> {
    let grid = config_grid(cfg)?;
    let n = grid.n_total();
    let cap = cfg.oracle_cap.min(DENSE_CAP);
    if n > cap {
        return Err(CliError::Config(format!("refusing oracle check: instance has {n} unknowns, cap is {cap}")));
    }
    let params = load_params(cfg, grid, None)?;
    let p0 = build_p0_precision(&params, cfg.scheme, cfg.p0)?;
    let joint = build_joint_precision(&params, cfg.scheme, &p0)?;
    let mut q = joint.q.clone();
    if cfg.corrupt == Corruption::Asymmetry {
        let pos = q.position(0, 1).expect("neighbouring nodes are coupled");
        let bump = 1e-3 * q.max_abs();
        q.data_mut()[pos] += bump;
    }
    let mut checks = Vec::new();

    let dense = dense_prior_precision(&params, cfg.scheme, &p0.to_dense());
    let qd = q.to_dense();
    checks.push(Check::new("precision_assembly", 1e-8, dense.as_ref().map(|d| (&qd - d).norm() / d.norm()).map_err(|e| spdegp::Error::InvalidParameter(e.to_string()))));
    checks.push(Check::new("precision_symmetry", 1e-12, Ok(q.symmetry_discrepancy())));

    let mut rng = member_rng(cfg.seed, 0);
    let xb: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let obs: Vec<Observation> = (0..n)
        .filter(|_| rng.gen_bool(0.3))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|index| Observation { index, value: rng.gen_range(-1.0..1.0), noise_var: rng.gen_range(0.05..0.5) })
        .collect();
    let obs = ObsSet::new(grid, obs)?;
    let duality = (|| {
        let x = optimal_interpolate(&q, &obs, &xb)?.x;
        let cov = qd.clone().try_inverse().ok_or_else(|| spdegp::Error::InvalidParameter("singular precision".into()))?;
        let y = covariance_oi(&cov, &obs, &xb)?;
        Ok(x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    })();
    checks.push(Check::new("oi_duality", 1e-6, duality));

    let logdet = (|| {
        let sparse = CholeskyFactor::factorize(&q, Ordering::default())?.logdet();
        let chol = qd.clone().cholesky().ok_or(spdegp::Error::NotPositiveDefinite { pivot: 0 })?;
        let dense: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(rel_gap(sparse, dense).max(rel_gap(joint.logdet_from_blocks(), dense)))
    })();
    checks.push(Check::new("logdet", 1e-8, logdet));
    checks.extend(backward_checks(cfg.seed));

    let all_passed = checks.iter().all(Check::passed);
    prepare_out(cfg)?;
    let mut s = summary_head(cfg, "oracle-check");
    s.insert("unknowns".into(), json!(n));
    s.insert("checks".into(), Value::Array(checks.iter().map(Check::to_json).collect()));
    s.insert("all_passed".into(), json!(all_passed));
    let value = write_summary(cfg, "oracle_report.json", s)?;
    if all_passed {
        Ok(value)
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
        println!("{}", serde_json::to_string_pretty(&value).expect("summary serializes"));
        Err(CliError::Numerical(format!("oracle checks failed: {}", failed.join(", "))))
    }
}
