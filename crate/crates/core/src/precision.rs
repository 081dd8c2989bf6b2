//! Assembly of the block-tridiagonal space-time prior precision, the
//! initial-state precision and the observation-augmented posterior precision.
//!
//! With `x_k = M_k x_{k−1} + η_k`, `M_k = Minv_k⁻¹`, `Minv_k = I + dt B_k` and
//! innovation covariance `dt M_k τ_k Q_s⁻¹ τ_k M_kᵀ`, each step contributes the
//! innovation precision `S_k⁻¹ = (1/dt) Minv_kᵀ Q̃_k Minv_k` with
//! `Q̃_k = τ_k⁻¹ Q_s τ_k⁻¹`. All blocks are polynomials in the sparse `Minv_k`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ObsSet;
use crate::operator::{operator_power, operator_with_partials, spatial_noise_precision, step_matrix_from_power, Partials, Scheme};
use crate::par;
use crate::params::ParamFields;
use crate::sparse::{write_matrix_market, CholeskyFactor, CsrMatrix, Ordering};

/// Largest number of unknowns handled by dense routes.
pub const DENSE_CAP: usize = 4096;

/// How the initial-state precision is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum P0Mode {
    /// Dense stabilization run `P ← M P Mᵀ + S` of `n_stab` steps from `P = S`.
    Recursion { n_stab: usize },
    /// Single-step precision `S⁻¹` at the initial parameters (sparse).
    Innovation,
}

impl Default for P0Mode {
    fn default() -> Self {
        P0Mode::Recursion { n_stab: 200 }
    }
}

/// Per parameter step: operator, its power, step matrix and weighted noise precision.
#[derive(Debug, Clone)]
pub struct StepParts {
    pub a: CsrMatrix,
    pub a_partials: Vec<Partials>,
    pub b: CsrMatrix,
    pub minv: CsrMatrix,
    pub qtilde: CsrMatrix,
}

/// `τ⁻¹ Q_s τ⁻¹`.
pub fn weighted_noise_precision(qs: &CsrMatrix, tau: &[f64]) -> CsrMatrix {
    let inv: Vec<f64> = tau.iter().map(|t| 1.0 / t).collect();
    qs.scale_rows_cols(&inv, &inv)
}

/// `(1/dt) Minvᵀ Q̃ Minv`.
pub fn innovation_precision(minv: &CsrMatrix, qtilde: &CsrMatrix, dt: f64) -> Result<CsrMatrix> {
    Ok(minv.transpose().matmul(&qtilde.matmul(minv)?)?.scaled(1.0 / dt))
}

/// Operators and weighted noise precisions for every distinct parameter step.
pub fn step_parts(params: &ParamFields, scheme: Scheme) -> Result<Vec<StepParts>> {
    let qs = spatial_noise_precision(&params.grid, &params.noise)?;
    let grid = params.grid;
    par::try_map_range(params.steps.len(), |s| {
        let step = &params.steps[s];
        let (a, a_partials) = operator_with_partials(&grid, step, scheme)?;
        let b = operator_power(&a, params.alpha)?;
        let minv = step_matrix_from_power(&b, grid.dt)?;
        let qtilde = weighted_noise_precision(&qs, &step.tau);
        Ok(StepParts { a, a_partials, b, minv, qtilde })
    })
}

/// `Σ_{j=0}^{n} M^j S M^jᵀ`, i.e. `n` steps of `P ← M P Mᵀ + S` from `P = S`,
/// evaluated by binary doubling.
pub fn stationary_recursion(m: &DMatrix<f64>, s: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let size = m.nrows();
    let terms = n + 1;
    let mut t = DMatrix::zeros(size, size);
    let mut mc = DMatrix::identity(size, size);
    for bit in (0..usize::BITS - terms.leading_zeros()).rev() {
        t = &t + &mc * &t * mc.transpose();
        mc = &mc * &mc;
        if (terms >> bit) & 1 == 1 {
            t = s + m * &t * m.transpose();
            mc = m * mc;
        }
    }
    (&t + t.transpose()) * 0.5
}

fn dense_spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter(format!("{what} is not positive definite")))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Dense initial-state covariance from the stabilization run at `θ_0`.
pub fn p0_recursion_covariance(params: &ParamFields, scheme: Scheme, n_stab: usize) -> Result<DMatrix<f64>> {
    let m = params.grid.n_nodes();
    if m > DENSE_CAP {
        return Err(Error::Unsupported(format!(
            "recursion-mode initial precision is dense; {m} nodes exceed the cap of {DENSE_CAP}"
        )));
    }
    if n_stab < 1 {
        return Err(Error::InvalidParameter("n_stab must be >= 1".into()));
    }
    let qs = spatial_noise_precision(&params.grid, &params.noise)?;
    let step = params.at(0);
    let a = crate::operator::assemble_step_operator(&params.grid, step, scheme)?;
    let minv = step_matrix_from_power(&operator_power(&a, params.alpha)?, params.grid.dt)?.to_dense();
    let mmat = minv
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("step matrix is singular".into()))?;
    let qt = weighted_noise_precision(&qs, &step.tau).to_dense();
    let qt_inv = dense_spd_inverse(&qt, "noise precision")?;
    let s = &mmat * qt_inv * mmat.transpose() * params.grid.dt;
    let s = (&s + s.transpose()) * 0.5;
    Ok(stationary_recursion(&mmat, &s, n_stab))
}

/// Initial-state precision `P₀⁻¹`.
pub fn build_p0_precision(params: &ParamFields, scheme: Scheme, mode: P0Mode) -> Result<CsrMatrix> {
    match mode {
        P0Mode::Recursion { n_stab } => {
            let p = p0_recursion_covariance(params, scheme, n_stab)?;
            Ok(CsrMatrix::from_dense(&dense_spd_inverse(&p, "initial covariance")?))
        }
        P0Mode::Innovation => {
            let grid = params.grid;
            let step = params.at(0);
            let a = crate::operator::assemble_step_operator(&grid, step, scheme)?;
            let minv = step_matrix_from_power(&operator_power(&a, params.alpha)?, grid.dt)?;
            let qs = spatial_noise_precision(&grid, &params.noise)?;
            innovation_precision(&minv, &weighted_noise_precision(&qs, &step.tau), grid.dt)
        }
    }
}

/// Assembled prior precision with its block layout and provenance.
#[derive(Debug, Clone)]
pub struct JointPrecision {
    pub q: CsrMatrix,
    /// Nodes per frame.
    pub m: usize,
    pub n_steps: usize,
    pub scheme: Scheme,
    pub alpha: u32,
    pub params_hash: String,
    /// `log|P₀⁻¹|` followed by `log|S_k⁻¹|` for `k = 1..n_steps`.
    pub block_logdets: Vec<f64>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    m: usize,
    n_steps: usize,
    n: usize,
    nnz: usize,
    scheme: Scheme,
    alpha: u32,
    params_hash: &'a str,
    block_logdets: &'a [f64],
}

impl JointPrecision {
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// `log|Q|` as the sum of the per-block log-determinants.
    pub fn logdet_from_blocks(&self) -> f64 {
        self.block_logdets.iter().sum()
    }

    /// True when no entry couples frames more than one step apart.
    pub fn is_block_tridiagonal(&self) -> bool {
        self.q.triplets().all(|(i, j, _)| (i / self.m).abs_diff(j / self.m) <= 1)
    }

    /// Matrix Market file at `path` plus a JSON sidecar with the block layout.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_matrix_market(&self.q, &path.with_extension("mtx"))?;
        let side = Sidecar {
            m: self.m,
            n_steps: self.n_steps,
            n: self.n(),
            nnz: self.q.nnz(),
            scheme: self.scheme,
            alpha: self.alpha,
            params_hash: &self.params_hash,
            block_logdets: &self.block_logdets,
        };
        let jpath = path.with_extension("json");
        fs::write(&jpath, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&jpath, e))
    }
}

fn check_block(a: &CsrMatrix, block: usize) -> Result<f64> {
    match CholeskyFactor::factorize(a, Ordering::default()) {
        Ok(f) => Ok(f.logdet()),
        Err(Error::NotPositiveDefinite { pivot }) => Err(Error::IndefiniteBlock { block, pivot }),
        Err(e) => Err(e),
    }
}

/// Assemble the joint precision from precomputed step parts. Definiteness is
/// validated block by block: `Q` is positive definite exactly when `P₀⁻¹`
/// and every `S_k⁻¹` are.
pub fn assemble_joint(params: &ParamFields, scheme: Scheme, parts: &[StepParts], p0inv: &CsrMatrix) -> Result<JointPrecision> {
    let m = params.grid.n_nodes();
    let n_steps = params.grid.n_steps;
    let dt = params.grid.dt;
    if p0inv.nrows() != m || p0inv.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, found: p0inv.nrows() });
    }
    let s_inv: Vec<CsrMatrix> = par::try_map_range(parts.len(), |s| innovation_precision(&parts[s].minv, &parts[s].qtilde, dt))?;
    let off: Vec<CsrMatrix> = par::try_map_range(parts.len(), |s| Ok::<_, Error>(parts[s].minv.transpose().matmul(&parts[s].qtilde)?.scaled(-1.0 / dt)))?;

    let mut first_use = vec![None; parts.len()];
    for k in (1..n_steps).rev() {
        first_use[params.step_index(k)] = Some(k);
    }
    let used: Vec<(usize, usize)> = first_use.iter().enumerate().filter_map(|(s, k)| k.map(|k| (s, k))).collect();
    let checked = par::try_map_range(used.len(), |u| check_block(&s_inv[used[u].0], used[u].1))?;
    let mut unique = vec![0.0; parts.len()];
    for (&(s, _), ld) in used.iter().zip(checked) {
        unique[s] = ld;
    }
    let mut logdets = vec![check_block(p0inv, 0)?];
    for k in 1..n_steps {
        logdets.push(unique[params.step_index(k)]);
    }

    let mut trip = Vec::new();
    p0inv.push_block(&mut trip, 0, 0, 1.0);
    for k in 1..n_steps {
        let s = params.step_index(k);
        let (r, c) = (k * m, (k - 1) * m);
        // (k−1, k−1) gains Q̃_k / dt; (k, k) gains S_k⁻¹.
        parts[s].qtilde.push_block(&mut trip, c, c, 1.0 / dt);
        s_inv[s].push_block(&mut trip, r, r, 1.0);
        off[s].push_block(&mut trip, r, c, 1.0);
        for (i, j, v) in off[s].triplets() {
            trip.push((c + j, r + i, v));
        }
    }
    let n = m * n_steps;
    let q = CsrMatrix::from_triplets(n, n, &trip)?;
    Ok(JointPrecision {
        q,
        m,
        n_steps,
        scheme,
        alpha: params.alpha,
        params_hash: params.hash(),
        block_logdets: logdets,
    })
}

/// Joint prior precision for `params` with a given `P₀⁻¹`.
pub fn build_joint_precision(params: &ParamFields, scheme: Scheme, p0inv: &CsrMatrix) -> Result<JointPrecision> {
    let parts = step_parts(params, scheme)?;
    assemble_joint(params, scheme, &parts, p0inv)
}

/// `Q + Hᵀ R⁻¹ H`: adds `1/r` on the diagonal at every observed index.
pub fn build_posterior_precision(q: &CsrMatrix, obs: &ObsSet) -> Result<CsrMatrix> {
    let mut post = q.clone();
    for o in obs.iter() {
        if o.index >= q.nrows() {
            return Err(Error::DimensionMismatch { expected: q.nrows(), found: o.index });
        }
        if !(o.noise_var > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "observation at {} has noise variance {}; exact constraints need a positive variance",
                o.index, o.noise_var
            )));
        }
        let p = post
            .position(o.index, o.index)
            .ok_or_else(|| Error::InvalidParameter(format!("precision has no diagonal entry at {}", o.index)))?;
        post.data_mut()[p] += 1.0 / o.noise_var;
    }
    Ok(post)
}
