//! Prior simulation, sampling from a sparse precision, optimal interpolation,
//! the variational cost and a gradient-descent solver.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid2D, ObsSet, SpaceTimeField};
use crate::operator::{spatial_noise_precision, Scheme};
use crate::params::{check_stability, NoiseModel, ParamFields};
use crate::precision::{build_posterior_precision, step_parts};
use crate::sparse::{CholeskyFactor, CsrMatrix, Ordering};

/// Noise variance substituted for exact (`r = 0`) observations.
pub const EXACT_NOISE_VAR: f64 = 1e-10;

/// A state sequence with its generation metadata.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: SpaceTimeField,
    pub background: Option<SpaceTimeField>,
    pub seed: Option<u64>,
    pub params_hash: Option<String>,
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Solver for `Minv x = b` with a nonsymmetric `Minv`, through a Cholesky
/// factor of `Minvᵀ Minv` and iterative refinement.
#[derive(Debug, Clone)]
struct StepSolver {
    minv: CsrMatrix,
    minv_t: CsrMatrix,
    normal: CholeskyFactor,
}

const REFINE_ROUNDS: usize = 3;

impl StepSolver {
    fn new(minv: CsrMatrix) -> Result<Self> {
        let minv_t = minv.transpose();
        let normal = CholeskyFactor::factorize(&minv_t.matmul(&minv)?.symmetrized()?, Ordering::default())?;
        Ok(StepSolver { minv, minv_t, normal })
    }

    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.normal.solve(&self.minv_t.spmv(b)?)?;
        for _ in 0..REFINE_ROUNDS {
            let r: Vec<f64> = b.iter().zip(self.minv.spmv(&x)?).map(|(b, ax)| b - ax).collect();
            let dx = self.normal.solve(&self.minv_t.spmv(&r)?)?;
            x.iter_mut().zip(dx).for_each(|(x, d)| *x += d);
        }
        Ok(x)
    }
}

/// Reusable implicit-scheme simulator with factored step matrices.
#[derive(Debug, Clone)]
pub struct PriorSimulator {
    params: ParamFields,
    solvers: Vec<StepSolver>,
    noise_factor: Option<CholeskyFactor>,
    white_scale: f64,
}

impl PriorSimulator {
    pub fn new(params: &ParamFields, scheme: Scheme) -> Result<Self> {
        let report = check_stability(params)?;
        if !report.ok {
            warn!("stability check failed: max Courant number {:.3}", report.max_cfl);
        }
        let parts = step_parts(params, scheme)?;
        let solvers = crate::par::try_map_range(parts.len(), |s| StepSolver::new(parts[s].minv.clone()))?;
        let g = params.grid;
        let noise_factor = match params.noise {
            NoiseModel::White => None,
            NoiseModel::Colored { .. } => Some(CholeskyFactor::factorize(&spatial_noise_precision(&g, &params.noise)?, Ordering::default())?),
        };
        Ok(PriorSimulator {
            params: params.clone(),
            solvers,
            noise_factor,
            white_scale: 1.0 / (g.dx * g.dy).sqrt(),
        })
    }

    pub fn grid(&self) -> Grid2D {
        self.params.grid
    }

    /// Spatial noise `ε` with precision `Q_s`.
    fn noise(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let z = standard_normals(rng, self.params.grid.n_nodes());
        match &self.noise_factor {
            None => Ok(z.into_iter().map(|v| v * self.white_scale).collect()),
            Some(f) => f.apply_inv_lt(&z),
        }
    }

    /// One implicit step from `x` to time index `t`.
    pub fn step(&self, x: &[f64], t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let eps = self.noise(rng)?;
        let tau = &self.params.at(t).tau;
        let sdt = self.params.grid.dt.sqrt();
        let rhs: Vec<f64> = x.iter().zip(&eps).zip(tau).map(|((x, e), t)| x + sdt * t * e).collect();
        self.solvers[self.params.step_index(t)].solve(&rhs)
    }

    /// Noise-free step `x ↦ M_t x`.
    pub fn propagate(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.solvers[self.params.step_index(t)].solve(x)
    }

    /// Full trajectory of `grid.n_steps` states starting from `x0`.
    pub fn run(&self, x0: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let g = self.params.grid;
        let m = g.n_nodes();
        if x0.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: x0.len() });
        }
        let mut out = Vec::with_capacity(g.n_total());
        out.extend_from_slice(x0);
        for t in 1..g.n_steps {
            let next = self.step(&out[(t - 1) * m..t * m], t, rng)?;
            out.extend(next);
        }
        Ok(out)
    }
}

/// Simulate the SPDE forward from `x0` with the implicit scheme.
pub fn simulate_prior(params: &ParamFields, scheme: Scheme, x0: &Field, seed: u64) -> Result<Trajectory> {
    let sim = PriorSimulator::new(params, scheme)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = sim.run(&x0.values, &mut rng)?;
    Ok(Trajectory {
        x: SpaceTimeField::new(params.grid, data)?,
        background: None,
        seed: Some(seed),
        params_hash: Some(params.hash()),
    })
}

/// `mean + Pᵀ L⁻ᵀ P z`: a draw with precision `Pᵀ L Lᵀ P` for a given standard
/// normal `z`. Permuting `z` first makes the draw independent of the ordering
/// whenever `L` is diagonal.
pub fn sample_with_noise(factor: &CholeskyFactor, mean: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != factor.n() || z.len() != factor.n() {
        return Err(Error::DimensionMismatch { expected: factor.n(), found: mean.len().min(z.len()) });
    }
    let pz: Vec<f64> = factor.perm().iter().map(|&old| z[old]).collect();
    let d = factor.apply_inv_lt(&pz)?;
    Ok(mean.iter().zip(d).map(|(m, d)| m + d).collect())
}

/// Gaussian draw with precision given by `factor`, reproducible per RNG state.
pub fn sample_from_precision_rng(factor: &CholeskyFactor, mean: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let z = standard_normals(rng, factor.n());
    sample_with_noise(factor, mean, &z)
}

/// Gaussian draw with precision given by `factor`, reproducible per seed.
pub fn sample_from_precision(factor: &CholeskyFactor, mean: &[f64], seed: u64) -> Result<Vec<f64>> {
    sample_from_precision_rng(factor, mean, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn regularized(obs: &ObsSet) -> Result<ObsSet> {
    if obs.iter().all(|o| o.noise_var > 0.0) {
        return Ok(obs.clone());
    }
    warn!("exact observations regularized with noise variance {EXACT_NOISE_VAR:e}");
    let v = obs
        .iter()
        .map(|o| crate::grid::Observation {
            noise_var: if o.noise_var > 0.0 { o.noise_var } else { EXACT_NOISE_VAR },
            ..*o
        })
        .collect();
    ObsSet::new(obs.grid, v)
}

/// Factored posterior precision `Q + Hᵀ R⁻¹ H` for fixed observation locations.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub precision: CsrMatrix,
    pub factor: CholeskyFactor,
    pub obs: ObsSet,
}

impl Posterior {
    pub fn new(q: &CsrMatrix, obs: &ObsSet) -> Result<Self> {
        let obs = regularized(obs)?;
        let precision = build_posterior_precision(q, &obs)?;
        let factor = CholeskyFactor::factorize(&precision, Ordering::default())?;
        Ok(Posterior { precision, factor, obs })
    }

    /// Right-hand side `Hᵀ R⁻¹ (y − H x_b)` for observed values `y`.
    pub fn rhs(&self, xb: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.obs.len() {
            return Err(Error::DimensionMismatch { expected: self.obs.len(), found: values.len() });
        }
        let mut rhs = vec![0.0; xb.len()];
        for (o, y) in self.obs.iter().zip(values) {
            rhs[o.index] += (y - xb[o.index]) / o.noise_var;
        }
        Ok(rhs)
    }

    /// Interpolation of `values` at the stored locations around background `xb`.
    pub fn interpolate(&self, xb: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        let n = self.factor.n();
        if xb.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: xb.len() });
        }
        let d = self.factor.solve(&self.rhs(xb, values)?)?;
        Ok(xb.iter().zip(d).map(|(b, d)| b + d).collect())
    }
}

/// Interpolated state together with the reusable posterior factor.
#[derive(Debug, Clone)]
pub struct OiResult {
    pub x: Vec<f64>,
    pub posterior: Posterior,
}

/// Solve `(Q + Hᵀ R⁻¹ H)(x★ − x_b) = Hᵀ R⁻¹ (y − H x_b)`.
pub fn optimal_interpolate(q: &CsrMatrix, obs: &ObsSet, xb: &[f64]) -> Result<OiResult> {
    let posterior = Posterior::new(q, obs)?;
    let values: Vec<f64> = posterior.obs.iter().map(|o| o.value).collect();
    let x = posterior.interpolate(xb, &values)?;
    Ok(OiResult { x, posterior })
}

/// Quadratic variational problem `Σ (x_k − y_k)²/r_k + λ (x − x_b)ᵀ Q (x − x_b)`.
#[derive(Debug, Clone, Copy)]
pub struct Variational<'a> {
    pub q: &'a CsrMatrix,
    pub obs: &'a ObsSet,
    pub xb: &'a [f64],
    pub lambda: f64,
}

impl Variational<'_> {
    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.q.nrows() || self.xb.len() != self.q.nrows() {
            return Err(Error::DimensionMismatch { expected: self.q.nrows(), found: x.len() });
        }
        if self.obs.iter().any(|o| !(o.noise_var > 0.0)) {
            return Err(Error::InvalidParameter("variational cost needs positive noise variances".into()));
        }
        Ok(())
    }

    pub fn cost(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let misfit: f64 = self.obs.iter().map(|o| (x[o.index] - o.value).powi(2) / o.noise_var).sum();
        if self.lambda == 0.0 {
            return Ok(misfit);
        }
        let d: Vec<f64> = x.iter().zip(self.xb).map(|(a, b)| a - b).collect();
        Ok(misfit + self.lambda * self.q.bilinear(&d, &d)?)
    }

    /// `2 Hᵀ R⁻¹ (H x − y) + 2 λ Q (x − x_b)`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let d: Vec<f64> = x.iter().zip(self.xb).map(|(a, b)| a - b).collect();
        let mut g = self.q.spmv(&d)?;
        g.iter_mut().for_each(|v| *v *= 2.0 * self.lambda);
        for o in self.obs.iter() {
            g[o.index] += 2.0 * (x[o.index] - o.value) / o.noise_var;
        }
        Ok(g)
    }

    /// `gᵀ A g` with `A = Hᵀ R⁻¹ H + λ Q`, the curvature along `g`.
    fn curvature(&self, g: &[f64]) -> Result<f64> {
        let data: f64 = self.obs.iter().map(|o| g[o.index].powi(2) / o.noise_var).sum();
        Ok(data + self.lambda * self.q.bilinear(g, g)?)
    }

    /// Diagonal of the Hessian `2 (Hᵀ R⁻¹ H + λ Q)`.
    fn hessian_diagonal(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.q.diagonal().into_iter().map(|v| 2.0 * self.lambda * v).collect();
        for o in self.obs.iter() {
            d[o.index] += 2.0 / o.noise_var;
        }
        d
    }
}

/// `Σ_obs (x_k − y_k)²/r_k + λ (x − x_b)ᵀ Q (x − x_b)`.
pub fn variational_cost(x: &[f64], obs: &ObsSet, q: &CsrMatrix, xb: &[f64], lambda: f64) -> Result<f64> {
    Variational { q, obs, xb, lambda }.cost(x)
}

/// Gradient of [`variational_cost`].
pub fn variational_gradient(x: &[f64], obs: &ObsSet, q: &CsrMatrix, xb: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Variational { q, obs, xb, lambda }.gradient(x)
}

/// Step-length rule of the descent solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// Fixed step `eta`; halved with a warning whenever the cost increases.
    Fixed { eta: f64 },
    /// Armijo backtracking from an adaptive trial step.
    Backtracking { eta0: f64 },
    /// Exact minimizer along the search direction (quadratic cost).
    Exact,
}

/// Maps a gradient to a search direction.
pub trait UpdateRule {
    fn direction(&mut self, gradient: &[f64]) -> Vec<f64>;
}

/// Plain steepest descent `p = −g`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SteepestDescent;

impl UpdateRule for SteepestDescent {
    fn direction(&mut self, gradient: &[f64]) -> Vec<f64> {
        gradient.iter().map(|g| -g).collect()
    }
}

/// Diagonally preconditioned descent `p = −D⁻¹ g`.
#[derive(Debug, Clone)]
pub struct Jacobi {
    pub inv_diag: Vec<f64>,
}

impl UpdateRule for Jacobi {
    fn direction(&mut self, gradient: &[f64]) -> Vec<f64> {
        gradient.iter().zip(&self.inv_diag).map(|(g, d)| -g * d).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub rule: StepRule,
    pub n_iters: usize,
    /// Stop once `‖g‖` falls below `grad_tol · max(1, ‖g₀‖)`.
    pub grad_tol: f64,
    pub precondition: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rule: StepRule::Backtracking { eta0: 1.0 },
            n_iters: 500,
            grad_tol: 1e-12,
            precondition: true,
        }
    }
}

/// Iterate, iteration count and the cost after every accepted iteration.
#[derive(Debug, Clone, Serialize)]
pub struct VariationalState {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    pub grad_norm: f64,
}

const MAX_HALVINGS: usize = 20;
const ARMIJO_C: f64 = 1e-4;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn axpy(x: &[f64], s: f64, p: &[f64]) -> Vec<f64> {
    x.iter().zip(p).map(|(x, p)| x + s * p).collect()
}

/// Gradient descent on the variational cost with a pluggable direction rule.
pub fn gradient_descent_solve_with(problem: &Variational, x0: &[f64], cfg: &SolverConfig, update: &mut dyn UpdateRule) -> Result<VariationalState> {
    let mut x = x0.to_vec();
    let mut cost = problem.cost(&x)?;
    let mut g = problem.gradient(&x)?;
    let g0 = norm(&g).max(1.0);
    let mut history = vec![cost];
    let mut eta = match cfg.rule {
        StepRule::Fixed { eta } | StepRule::Backtracking { eta0: eta } => eta,
        StepRule::Exact => 1.0,
    };
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {eta}")));
    }
    let mut iterations = 0;
    while iterations < cfg.n_iters && norm(&g) > cfg.grad_tol * g0 {
        let p = update.direction(&g);
        let slope = dot(&g, &p);
        if slope >= 0.0 {
            break;
        }
        let (next, next_cost) = match cfg.rule {
            StepRule::Exact => {
                let curv = problem.curvature(&p)?;
                if !(curv > 0.0) {
                    break;
                }
                let step = -slope / (2.0 * curv);
                let nx = axpy(&x, step, &p);
                let c = problem.cost(&nx)?;
                (nx, c)
            }
            StepRule::Fixed { .. } => {
                let mut halvings = 0;
                loop {
                    let nx = axpy(&x, eta, &p);
                    let c = problem.cost(&nx)?;
                    if c <= cost {
                        break (nx, c);
                    }
                    halvings += 1;
                    if halvings > MAX_HALVINGS {
                        return Err(Error::Divergence(format!("cost still increasing after {MAX_HALVINGS} step halvings")));
                    }
                    eta *= 0.5;
                    warn!("cost increased; fixed step halved to {eta:e}");
                }
            }
            StepRule::Backtracking { .. } => {
                let mut halvings = 0;
                loop {
                    let nx = axpy(&x, eta, &p);
                    let c = problem.cost(&nx)?;
                    if c <= cost + ARMIJO_C * eta * slope {
                        let out = (nx, c);
                        eta *= 2.0;
                        break out;
                    }
                    halvings += 1;
                    eta *= 0.5;
                    if halvings > 60 {
                        return Err(Error::Divergence("line search failed to decrease the cost".into()));
                    }
                }
            }
        };
        if next_cost > cost {
            break;
        }
        x = next;
        cost = next_cost;
        g = problem.gradient(&x)?;
        history.push(cost);
        iterations += 1;
    }
    Ok(VariationalState {
        grad_norm: norm(&g),
        x,
        iterations,
        cost_history: history,
    })
}

/// Gradient descent from `x_b` on the variational cost.
pub fn gradient_descent_solve(obs: &ObsSet, q: &CsrMatrix, xb: &[f64], lambda: f64, cfg: &SolverConfig) -> Result<VariationalState> {
    let obs = regularized(obs)?;
    let problem = Variational { q, obs: &obs, xb, lambda };
    if cfg.precondition {
        let inv_diag = problem.hessian_diagonal().into_iter().map(|d| if d > 0.0 { 2.0 / d } else { 1.0 }).collect();
        gradient_descent_solve_with(&problem, xb, cfg, &mut Jacobi { inv_diag })
    } else {
        gradient_descent_solve_with(&problem, xb, cfg, &mut SteepestDescent)
    }
}
