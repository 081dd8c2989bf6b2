//! Gaussian negative log-likelihood under the space-time prior, gradients
//! through the precision assembly, and fitting of coarse parameter grids with
//! a mixed reconstruction and likelihood loss.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use serde::Serialize;

use crate::engine::optimal_interpolate;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, ObsSet};
use crate::operator::Scheme;
use crate::par;
use crate::params::{inverse_transform, positive_transform, positive_transform_derivative, NoiseModel, ParamFields, StepParams, COMPONENTS};
use crate::precision::{assemble_joint, innovation_precision, step_parts, StepParts};
use crate::sparse::{solve_backward_with, CholeskyFactor, CsrMatrix, Ordering};

/// Components mapped through the positive transform, in [`COMPONENTS`] order.
pub const POSITIVE: [bool; 8] = [true, false, false, true, true, false, false, true];
const N_COMP: usize = COMPONENTS.len();

/// `−log|Q| + xᵀ Q x` for a centred state `x`.
pub fn nll(x: &[f64], factor: &CholeskyFactor, q: &CsrMatrix) -> Result<f64> {
    Ok(-factor.logdet() + q.bilinear(x, x)?)
}

/// Raw (unconstrained) parameters on a `P × P` lattice, bilinearly upsampled
/// to the nodes with corners aligned to the domain corners.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoarseParamGrid {
    pub p: usize,
    /// `raw[c][a * p + b]` for component `c`, lattice row `a` and column `b`.
    pub raw: Vec<Vec<f64>>,
}

impl CoarseParamGrid {
    /// Uniform physical values `[κ, m1, m2, γ, β, v1, v2, τ]`.
    pub fn from_values(p: usize, values: [f64; 8]) -> Result<Self> {
        if p < 1 {
            return Err(Error::InvalidParameter("coarse lattice size must be >= 1".into()));
        }
        let raw = (0..N_COMP)
            .map(|c| {
                let r = if POSITIVE[c] { inverse_transform(values[c])? } else { values[c] };
                Ok(vec![r; p * p])
            })
            .collect::<Result<_>>()?;
        Ok(CoarseParamGrid { p, raw })
    }

    pub fn len(&self) -> usize {
        N_COMP * self.p * self.p
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flat(&self) -> Vec<f64> {
        self.raw.concat()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: flat.len() });
        }
        let pp = self.p * self.p;
        Ok(CoarseParamGrid { p: self.p, raw: flat.chunks(pp).map(<[f64]>::to_vec).collect() })
    }

    /// Lattice corners and bilinear weights for every node.
    pub fn weights(&self, grid: &Grid2D) -> Vec<[(usize, f64); 4]> {
        let p = self.p;
        let axis = |s: usize, n: usize| -> (usize, usize, f64) {
            if p == 1 {
                return (0, 0, 0.0);
            }
            let u = s as f64 * (p - 1) as f64 / (n - 1) as f64;
            let lo = (u.floor() as usize).min(p - 2);
            (lo, lo + 1, u - lo as f64)
        };
        let mut out = Vec::with_capacity(grid.n_nodes());
        for i in 0..grid.ny {
            let (a0, a1, fa) = axis(i, grid.ny);
            for j in 0..grid.nx {
                let (b0, b1, fb) = axis(j, grid.nx);
                out.push([
                    (a0 * p + b0, (1.0 - fa) * (1.0 - fb)),
                    (a0 * p + b1, (1.0 - fa) * fb),
                    (a1 * p + b0, fa * (1.0 - fb)),
                    (a1 * p + b1, fa * fb),
                ]);
            }
        }
        out
    }

    fn upsampled_raw(&self, weights: &[[(usize, f64); 4]]) -> Vec<Vec<f64>> {
        self.raw
            .iter()
            .map(|r| weights.iter().map(|w| w.iter().map(|&(c, wt)| wt * r[c]).sum()).collect())
            .collect()
    }

    pub fn step_params(&self, grid: &Grid2D) -> StepParams {
        let up = self.upsampled_raw(&self.weights(grid));
        let comp = |c: usize| -> Vec<f64> {
            if POSITIVE[c] {
                up[c].iter().map(|&r| positive_transform(r)).collect()
            } else {
                up[c].clone()
            }
        };
        StepParams {
            kappa: comp(0),
            m1: comp(1),
            m2: comp(2),
            gamma: comp(3),
            beta: comp(4),
            v1: comp(5),
            v2: comp(6),
            tau: comp(7),
        }
    }

    /// Stationary parameter fields on `grid`.
    pub fn to_params(&self, grid: Grid2D, model: &ModelConfig) -> Result<ParamFields> {
        ParamFields::stationary(grid, self.step_params(&grid), model.alpha, model.noise)
    }

    /// Chain node-level component gradients down to the raw lattice values.
    pub fn pullback(&self, grid: &Grid2D, node_bars: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let weights = self.weights(grid);
        let up = self.upsampled_raw(&weights);
        (0..N_COMP)
            .map(|c| {
                let mut out = vec![0.0; self.p * self.p];
                for (k, w) in weights.iter().enumerate() {
                    let d = if POSITIVE[c] { positive_transform_derivative(up[c][k]) } else { 1.0 };
                    for &(idx, wt) in w {
                        out[idx] += wt * d * node_bars[c][k];
                    }
                }
                out
            })
            .collect()
    }

    /// Mean physical value of each component over the nodes.
    pub fn physical_means(&self, grid: &Grid2D) -> BTreeMap<String, f64> {
        let s = self.step_params(grid);
        (0..N_COMP)
            .map(|c| {
                let v = s.component(c);
                (COMPONENTS[c].to_string(), v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

/// Model settings that are not fitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub alpha: u32,
    pub noise: NoiseModel,
    pub scheme: Scheme,
}

fn add_on_pattern(target: &mut CsrMatrix, src: &CsrMatrix, scale: f64) {
    let vals = src.values_on_pattern(target);
    target.data_mut().iter_mut().zip(vals).for_each(|(t, v)| *t += scale * v);
}

/// Gradients `(Minv̄, Q̃̄)` of one parameter step.
struct StepAcc {
    minv: CsrMatrix,
    qtilde: CsrMatrix,
}

/// `S = c Xᵀ Y X` with symmetric `Y`: `X̄ += c Y X (S̄ + S̄ᵀ)`, `Ȳ += c X S̄ Xᵀ`.
fn innovation_backward(part: &StepParts, sbar: &CsrMatrix, c: f64, acc: &mut StepAcc) -> Result<()> {
    let sym = sbar.add(&sbar.transpose())?;
    add_on_pattern(&mut acc.minv, &part.qtilde.matmul(&part.minv)?.matmul(&sym)?, c);
    add_on_pattern(&mut acc.qtilde, &part.minv.matmul(sbar)?.matmul(&part.minv.transpose())?, c);
    Ok(())
}

/// Node-level gradients `[κ̄, m̄1, m̄2, γ̄, β̄, v̄1, v̄2, τ̄]` of a scalar loss for
/// every distinct parameter step, given `Ḡ = ∂loss/∂Q` on the pattern of `Q`.
/// `Q` must have been assembled with the innovation-mode initial precision.
pub fn precision_backward(params: &ParamFields, parts: &[StepParts], gbar: &CsrMatrix) -> Result<Vec<Vec<Vec<f64>>>> {
    let g = params.grid;
    let m = g.n_nodes();
    let dt = g.dt;
    if gbar.nrows() != g.n_total() {
        return Err(Error::DimensionMismatch { expected: g.n_total(), found: gbar.nrows() });
    }
    let mut acc: Vec<StepAcc> = parts
        .iter()
        .map(|p| StepAcc { minv: p.minv.scaled(0.0), qtilde: p.qtilde.scaled(0.0) })
        .collect();
    let blk = |r: usize, c: usize| gbar.block(r * m, c * m, m, m);
    let s0 = params.step_index(0);
    innovation_backward(&parts[s0], &blk(0, 0), 1.0 / dt, &mut acc[s0])?;
    for k in 1..g.n_steps {
        let s = params.step_index(k);
        innovation_backward(&parts[s], &blk(k, k), 1.0 / dt, &mut acc[s])?;
        add_on_pattern(&mut acc[s].qtilde, &blk(k - 1, k - 1), 1.0 / dt);
        // Off-diagonal pair −(1/dt) Xᵀ Y and its transpose.
        let cbar = blk(k, k - 1).add(&blk(k - 1, k).transpose())?;
        add_on_pattern(&mut acc[s].minv, &parts[s].qtilde.matmul(&cbar.transpose())?, -1.0 / dt);
        add_on_pattern(&mut acc[s].qtilde, &parts[s].minv.matmul(&cbar)?, -1.0 / dt);
    }
    par::try_map_range(parts.len(), |s| step_backward(params, &parts[s], &acc[s], s))
}

fn step_backward(params: &ParamFields, part: &StepParts, acc: &StepAcc, s: usize) -> Result<Vec<Vec<f64>>> {
    let m = params.grid.n_nodes();
    let step = &params.steps[s];
    let power = params.alpha / 2;
    // Minv = I + dt B.
    let mut bbar = part.b.scaled(0.0);
    add_on_pattern(&mut bbar, &acc.minv, params.grid.dt);
    // B = A^p: Ā = Σ_r (Aᵀ)^r B̄ (Aᵀ)^(p−1−r).
    let at = part.a.transpose();
    let mut at_pows = vec![CsrMatrix::identity(m)];
    for r in 1..power as usize {
        let next = at_pows[r - 1].matmul(&at)?;
        at_pows.push(next);
    }
    let mut abar = part.a.scaled(0.0);
    for r in 0..power as usize {
        let term = at_pows[r].matmul(&bbar)?.matmul(&at_pows[power as usize - 1 - r])?;
        add_on_pattern(&mut abar, &term, 1.0);
    }
    // Entry partials are taken with respect to the coefficients of the row node.
    let mut cbar = vec![[0.0f64; 6]; m];
    let (indptr, vals) = (abar.indptr(), abar.data());
    for i in 0..m {
        for e in indptr[i]..indptr[i + 1] {
            for c in 0..6 {
                cbar[i][c] += vals[e] * part.a_partials[e][c];
            }
        }
    }
    let mut out = vec![vec![0.0; m]; N_COMP];
    for k in 0..m {
        let [kb, h11, h12, h22, m1, m2] = cbar[k];
        let (b, v1, v2) = (step.beta[k], step.v1[k], step.v2[k]);
        out[0][k] = kb;
        out[1][k] = m1;
        out[2][k] = m2;
        out[3][k] = h11 + h22;
        out[4][k] = h11 * v1 * v1 + h12 * v1 * v2 + h22 * v2 * v2;
        out[5][k] = 2.0 * b * v1 * h11 + b * v2 * h12;
        out[6][k] = b * v1 * h12 + 2.0 * b * v2 * h22;
    }
    // Q̃ = τ⁻¹ Q_s τ⁻¹.
    let tau = &step.tau;
    for ((i, j, q), qb) in part.qtilde.triplets().zip(acc.qtilde.data()) {
        let c = qb * q;
        out[7][i] -= c / tau[i];
        out[7][j] -= c / tau[j];
    }
    Ok(out)
}

/// Weights of the reconstruction and likelihood terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub likelihood: f64,
}

impl LossWeights {
    /// `L₁ + λ L₂`; an infinite `λ` keeps only the likelihood.
    pub fn mixed(lambda_mix: f64) -> Result<Self> {
        if !(lambda_mix >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda_mix must be >= 0, got {lambda_mix}")));
        }
        Ok(if lambda_mix.is_infinite() {
            LossWeights { reconstruction: 0.0, likelihood: 1.0 }
        } else {
            LossWeights { reconstruction: 1.0, likelihood: lambda_mix }
        })
    }
}

/// Loss terms at one parameter value. `l2` is `None` when not evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub total: f64,
}

/// Supervised fitting problem: a truth trajectory, its observations and the
/// background around which both terms are evaluated.
#[derive(Debug, Clone, Copy)]
pub struct FitProblem<'a> {
    pub grid: Grid2D,
    pub model: ModelConfig,
    pub truth: &'a [f64],
    pub obs: &'a ObsSet,
    pub xb: &'a [f64],
    pub weights: LossWeights,
    /// Components that are optimized; the others keep their initial values.
    pub active: [bool; 8],
}

impl FitProblem<'_> {
    fn check(&self) -> Result<()> {
        let n = self.grid.n_total();
        for len in [self.truth.len(), self.xb.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, found: len });
            }
        }
        Ok(())
    }

    /// Loss and, when `with_gradient`, its gradient with respect to the raw
    /// lattice values (zero for inactive components).
    pub fn evaluate(&self, theta: &CoarseParamGrid, with_gradient: bool) -> Result<(LossParts, Option<Vec<f64>>)> {
        self.check()?;
        let params = theta.to_params(self.grid, &self.model)?;
        let parts = step_parts(&params, self.model.scheme)?;
        let s0 = params.step_index(0);
        let p0 = innovation_precision(&parts[s0].minv, &parts[s0].qtilde, self.grid.dt)?;
        let q = assemble_joint(&params, self.model.scheme, &parts, &p0)?.q;
        let mut gbar = q.scaled(0.0);
        let mut total = 0.0;

        let l1 = if self.weights.reconstruction > 0.0 {
            let oi = optimal_interpolate(&q, self.obs, self.xb)?;
            let err: Vec<f64> = oi.x.iter().zip(self.truth).map(|(a, b)| a - b).collect();
            let l1 = err.iter().map(|e| e * e).sum::<f64>();
            if with_gradient {
                let d: Vec<f64> = oi.x.iter().zip(self.xb).map(|(a, b)| a - b).collect();
                let g: Vec<f64> = err.iter().map(|e| 2.0 * e).collect();
                let (_, ga) = solve_backward_with(&oi.posterior.factor, &oi.posterior.precision, &d, &g)?;
                add_on_pattern(&mut gbar, &ga, self.weights.reconstruction);
            }
            total += self.weights.reconstruction * l1;
            Some(l1)
        } else {
            None
        };

        let l2 = if self.weights.likelihood > 0.0 {
            let d: Vec<f64> = self.truth.iter().zip(self.xb).map(|(a, b)| a - b).collect();
            let factor = CholeskyFactor::factorize(&q, Ordering::default())?;
            let l2 = nll(&d, &factor, &q)?;
            if with_gradient {
                let w = self.weights.likelihood;
                let inv = factor.logdet_gradient(&q)?;
                let vals: Vec<f64> = q.triplets().zip(inv.data()).map(|((i, j, _), qi)| w * (d[i] * d[j] - qi)).collect();
                add_on_pattern(&mut gbar, &q.with_data(vals)?, 1.0);
            }
            total += self.weights.likelihood * l2;
            Some(l2)
        } else {
            None
        };

        let loss = LossParts { l1, l2, total };
        if !with_gradient {
            return Ok((loss, None));
        }
        let bars = precision_backward(&params, &parts, &gbar)?;
        let mut node = vec![vec![0.0; self.grid.n_nodes()]; N_COMP];
        for step in &bars {
            for c in 0..N_COMP {
                node[c].iter_mut().zip(&step[c]).for_each(|(a, b)| *a += b);
            }
        }
        let mut coarse = theta.pullback(&self.grid, &node);
        for (c, v) in coarse.iter_mut().enumerate() {
            if !self.active[c] {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok((loss, Some(coarse.concat())))
    }

    pub fn loss(&self, theta: &CoarseParamGrid) -> Result<LossParts> {
        Ok(self.evaluate(theta, false)?.0)
    }

    /// Central finite differences of the total loss over active raw values.
    pub fn fd_gradient(&self, theta: &CoarseParamGrid, h: f64) -> Result<Vec<f64>> {
        let flat = theta.flat();
        let pp = theta.p * theta.p;
        par::try_map_range(flat.len(), |i| {
            if !self.active[i / pp] {
                return Ok(0.0);
            }
            let shifted = |s: f64| -> Result<f64> {
                let mut f = flat.clone();
                f[i] += s;
                Ok(self.loss(&theta.with_flat(&f)?)?.total)
            };
            Ok((shifted(h)? - shifted(-h)?) / (2.0 * h))
        })
    }
}

/// Gradient of the negative log-likelihood of `truth` with respect to the raw
/// lattice values.
pub fn nll_gradient(grid: Grid2D, model: ModelConfig, truth: &[f64], xb: &[f64], theta: &CoarseParamGrid, active: [bool; 8]) -> Result<(f64, Vec<f64>)> {
    let obs = ObsSet::empty(grid);
    let problem = FitProblem {
        grid,
        model,
        truth,
        obs: &obs,
        xb,
        weights: LossWeights { reconstruction: 0.0, likelihood: 1.0 },
        active,
    };
    let (loss, g) = problem.evaluate(theta, true)?;
    Ok((loss.total, g.expect("gradient requested")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitConfig {
    pub n_iters: usize,
    pub lr0: f64,
    pub grad_tol: f64,
    /// Smallest trial step before the line search gives up.
    pub min_lr: f64,
    /// Largest change of any raw lattice value in one step.
    pub max_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { n_iters: 50, lr0: 1e-2, grad_tol: 1e-8, min_lr: 1e-14, max_step: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub losses: Vec<LossParts>,
    pub grad_norms: Vec<f64>,
    pub iterations: usize,
    pub rejected_steps: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub theta: CoarseParamGrid,
    pub theta_means: BTreeMap<String, f64>,
    #[serde(skip)]
    pub params: ParamFields,
}

const ARMIJO_C: f64 = 1e-4;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Backtracking gradient descent on the raw lattice values. Trial points whose
/// precision is not positive definite are rejected and the step halved.
pub fn fit_parameters(problem: &FitProblem, theta0: &CoarseParamGrid, cfg: &FitConfig) -> Result<FitReport> {
    if !(cfg.lr0 > 0.0) {
        return Err(Error::InvalidParameter(format!("initial learning rate must be positive, got {}", cfg.lr0)));
    }
    if !(cfg.max_step > 0.0) {
        return Err(Error::InvalidParameter(format!("max step must be positive, got {}", cfg.max_step)));
    }
    let start = Instant::now();
    let mut theta = theta0.clone();
    let (mut loss, g) = problem.evaluate(&theta, true)?;
    let mut g = g.expect("gradient requested");
    let mut losses = vec![loss];
    let mut grad_norms = vec![norm(&g)];
    let mut lr = cfg.lr0;
    let mut rejected = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.n_iters {
        let gn = norm(&g);
        if gn <= cfg.grad_tol {
            converged = true;
            break;
        }
        let flat = theta.flat();
        let g_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        lr = lr.min(cfg.max_step / g_max);
        let accepted = loop {
            if lr < cfg.min_lr {
                break None;
            }
            let trial_flat: Vec<f64> = flat.iter().zip(&g).map(|(t, g)| t - lr * g).collect();
            let trial = theta.with_flat(&trial_flat)?;
            match problem.loss(&trial) {
                Ok(l) if l.total <= loss.total - ARMIJO_C * lr * gn * gn => break Some(trial),
                Ok(_) => {}
                Err(e) if e.is_numerical() => debug!("trial step rejected: {e}"),
                Err(e) => return Err(e),
            }
            rejected += 1;
            lr *= 0.5;
        };
        let Some(next) = accepted else {
            converged = true;
            break;
        };
        theta = next;
        let (l, ng) = problem.evaluate(&theta, true)?;
        loss = l;
        g = ng.expect("gradient requested");
        losses.push(loss);
        grad_norms.push(norm(&g));
        iterations += 1;
        lr *= 2.0;
        info!("fit iteration {iterations}: loss {:.6e}, |g| {:.3e}", loss.total, norm(&g));
    }
    if iterations == cfg.n_iters && norm(&g) <= cfg.grad_tol {
        converged = true;
    }
    let params = theta.to_params(problem.grid, &problem.model)?;
    Ok(FitReport {
        losses,
        grad_norms,
        iterations,
        rejected_steps: rejected,
        converged,
        wall_time_s: start.elapsed().as_secs_f64(),
        theta_means: theta.physical_means(&problem.grid),
        theta,
        params,
    })
}
