//! SPDE hyperparameters per node and time step, the diffusion-tensor
//! decomposition, positivity transforms and stability diagnostics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{read_space_time, write_space_time, Field, Grid2D, SpaceTimeField};

/// Lower bound of [`positive_transform`].
pub const POSITIVE_FLOOR: f64 = 1e-6;
/// Floor applied to κ and τ by [`init_from_field`].
pub const INIT_FLOOR: f64 = 1e-3;
/// Courant threshold above which the stability report fails.
pub const CFL_LIMIT: f64 = 1.0;
/// Peclet number above which the stability report warns.
pub const PECLET_WARN: f64 = 2.0;

/// Spatial noise feeding the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    White,
    /// Matérn-like noise with precision `dx dy Bᵀ B`, `B = (κ_s² − Δ)^(α_s/2)`.
    Colored { kappa_s: f64, alpha_s: u32 },
}

/// Parameter values at every node for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub kappa: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Names of the per-node components, in storage order.
pub const COMPONENTS: [&str; 8] = ["kappa", "m1", "m2", "gamma", "beta", "v1", "v2", "tau"];

impl StepParams {
    /// Spatially uniform values.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(m: usize, kappa: f64, m1: f64, m2: f64, gamma: f64, beta: f64, v1: f64, v2: f64, tau: f64) -> Self {
        StepParams {
            kappa: vec![kappa; m],
            m1: vec![m1; m],
            m2: vec![m2; m],
            gamma: vec![gamma; m],
            beta: vec![beta; m],
            v1: vec![v1; m],
            v2: vec![v2; m],
            tau: vec![tau; m],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.kappa.len()
    }

    pub fn component(&self, idx: usize) -> &[f64] {
        match idx {
            0 => &self.kappa,
            1 => &self.m1,
            2 => &self.m2,
            3 => &self.gamma,
            4 => &self.beta,
            5 => &self.v1,
            6 => &self.v2,
            7 => &self.tau,
            _ => panic!("component index {idx} out of range"),
        }
    }

    pub fn component_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        match idx {
            0 => &mut self.kappa,
            1 => &mut self.m1,
            2 => &mut self.m2,
            3 => &mut self.gamma,
            4 => &mut self.beta,
            5 => &mut self.v1,
            6 => &mut self.v2,
            7 => &mut self.tau,
            _ => panic!("component index {idx} out of range"),
        }
    }

    pub fn diffusion(&self) -> Result<DiffusionTensor> {
        build_diffusion_tensor(&self.gamma, &self.beta, &self.v1, &self.v2)
    }

    fn check(&self, m: usize, t: usize, problems: &mut Vec<String>) {
        for c in 0..COMPONENTS.len() {
            let vals = self.component(c);
            if vals.len() != m {
                problems.push(format!("step {t}: {} has {} values, expected {m}", COMPONENTS[c], vals.len()));
                continue;
            }
            if let Some(k) = vals.iter().position(|v| !v.is_finite()) {
                problems.push(format!("step {t}: {} not finite at node {k}", COMPONENTS[c]));
            }
        }
        for (name, vals) in [("kappa", &self.kappa), ("gamma", &self.gamma), ("tau", &self.tau)] {
            if let Some(k) = vals.iter().position(|&v| v <= 0.0) {
                problems.push(format!("step {t}: {name} must be > 0 (node {k} is {})", vals[k]));
            }
        }
        if let Some(k) = self.beta.iter().position(|&v| v < 0.0) {
            problems.push(format!("step {t}: beta must be >= 0 (node {k} is {})", self.beta[k]));
        }
    }
}

/// Pointwise diffusion tensor `H = γ I + β v vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTensor {
    pub h11: Vec<f64>,
    pub h12: Vec<f64>,
    pub h22: Vec<f64>,
}

impl DiffusionTensor {
    pub fn det(&self, k: usize) -> f64 {
        self.h11[k] * self.h22[k] - self.h12[k] * self.h12[k]
    }

    pub fn is_spd(&self) -> bool {
        (0..self.h11.len()).all(|k| self.h11[k] > 0.0 && self.h22[k] > 0.0 && self.det(k) > 0.0)
    }
}

pub fn build_diffusion_tensor(gamma: &[f64], beta: &[f64], v1: &[f64], v2: &[f64]) -> Result<DiffusionTensor> {
    let m = gamma.len();
    for len in [beta.len(), v1.len(), v2.len()] {
        if len != m {
            return Err(Error::DimensionMismatch { expected: m, found: len });
        }
    }
    if gamma.iter().any(|&g| !(g > 0.0)) || beta.iter().any(|&b| !(b >= 0.0)) {
        return Err(Error::InvalidParameter("diffusion needs gamma > 0 and beta >= 0".into()));
    }
    Ok(DiffusionTensor {
        h11: (0..m).map(|k| gamma[k] + beta[k] * v1[k] * v1[k]).collect(),
        h12: (0..m).map(|k| beta[k] * v1[k] * v2[k]).collect(),
        h22: (0..m).map(|k| gamma[k] + beta[k] * v2[k] * v2[k]).collect(),
    })
}

/// The full hyperparametrization: per-step fields plus global settings.
/// `steps` holds either one entry (constant in time) or one per state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFields {
    pub grid: Grid2D,
    pub steps: Vec<StepParams>,
    pub alpha: u32,
    pub noise: NoiseModel,
}

#[derive(Serialize, Deserialize)]
struct ParamsMeta {
    alpha: u32,
    noise: NoiseModel,
    n_param_steps: usize,
}

impl ParamFields {
    pub fn new(grid: Grid2D, steps: Vec<StepParams>, alpha: u32, noise: NoiseModel) -> Result<Self> {
        let p = ParamFields { grid, steps, alpha, noise };
        p.validate()?;
        Ok(p)
    }

    /// Same parameters at every time step.
    pub fn stationary(grid: Grid2D, step: StepParams, alpha: u32, noise: NoiseModel) -> Result<Self> {
        Self::new(grid, vec![step], alpha, noise)
    }

    /// Check every invariant and report all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.grid.validate() {
            problems.push(e.to_string());
        }
        if self.alpha < 2 || !self.alpha.is_multiple_of(2) {
            problems.push(format!(
                "alpha must be an even integer >= 2 (fractional powers are not supported), got {}",
                self.alpha
            ));
        }
        if let NoiseModel::Colored { kappa_s, alpha_s } = self.noise {
            if !(kappa_s > 0.0 && kappa_s.is_finite()) {
                problems.push(format!("kappa_s must be > 0, got {kappa_s}"));
            }
            if alpha_s < 2 || alpha_s % 2 != 0 {
                problems.push(format!("alpha_s must be an even integer >= 2, got {alpha_s}"));
            }
        }
        if self.steps.is_empty() || (self.steps.len() != 1 && self.steps.len() != self.grid.n_steps) {
            problems.push(format!(
                "expected 1 or {} parameter steps, got {}",
                self.grid.n_steps,
                self.steps.len()
            ));
        }
        let m = self.grid.n_nodes();
        for (t, s) in self.steps.iter().enumerate() {
            s.check(m, t, &mut problems);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }

    /// Index into `steps` used at state `t`.
    pub fn step_index(&self, t: usize) -> usize {
        if self.steps.len() == 1 {
            0
        } else {
            t
        }
    }

    pub fn at(&self, t: usize) -> &StepParams {
        &self.steps[self.step_index(t)]
    }

    pub fn is_time_constant(&self) -> bool {
        self.steps.len() == 1
    }

    /// Copy attached to a grid with a different number of states.
    pub fn with_grid(&self, grid: Grid2D) -> Result<Self> {
        let steps = if self.steps.len() == 1 || grid.n_steps == self.steps.len() {
            self.steps.clone()
        } else {
            return Err(Error::InvalidParameter(format!(
                "time-varying parameters have {} steps, grid has {}",
                self.steps.len(),
                grid.n_steps
            )));
        };
        Self::new(grid, steps, self.alpha, self.noise)
    }

    /// Hex digest of every value and setting, for provenance records.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.grid.dx, self.grid.dy, self.grid.dt] {
            h.update(v.to_le_bytes());
        }
        for v in [self.grid.nx, self.grid.ny, self.grid.n_steps, self.alpha as usize] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.noise).expect("noise serializes"));
        for s in &self.steps {
            for c in 0..COMPONENTS.len() {
                for v in s.component(c) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    /// The Gaussian-process benchmark: κ = 0.33, α = 4, γ = 1, β = 25, τ = 1,
    /// no advection, white noise, and a periodic cellular anisotropy field
    /// `v = (sin(2πx/Lx) cos(2πy/Ly), −cos(2πx/Lx) sin(2πy/Ly))`.
    pub fn gp_preset(grid: Grid2D) -> Result<Self> {
        let m = grid.n_nodes();
        let mut step = StepParams::uniform(m, 0.33, 0.0, 0.0, 1.0, 25.0, 0.0, 0.0, 1.0);
        let lx = grid.nx as f64 * grid.dx;
        let ly = grid.ny as f64 * grid.dy;
        let two_pi = 2.0 * std::f64::consts::PI;
        for k in 0..m {
            let (x, y) = grid.coords(k);
            step.v1[k] = (two_pi * x / lx).sin() * (two_pi * y / ly).cos();
            step.v2[k] = -(two_pi * x / lx).cos() * (two_pi * y / ly).sin();
        }
        Self::stationary(grid, step, 4, NoiseModel::White)
    }

    /// Stationary isotropic parameters (`β = 0`, no advection).
    pub fn isotropic(grid: Grid2D, kappa: f64, gamma: f64, tau: f64, alpha: u32) -> Result<Self> {
        let step = StepParams::uniform(grid.n_nodes(), kappa, 0.0, 0.0, gamma, 0.0, 0.0, 0.0, tau);
        Self::stationary(grid, step, alpha, NoiseModel::White)
    }

    /// Write one raster per component plus `params.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let grid = self.grid.with_steps(self.steps.len());
        for (c, name) in COMPONENTS.iter().enumerate() {
            let data: Vec<f64> = self.steps.iter().flat_map(|s| s.component(c).iter().copied()).collect();
            write_space_time(&SpaceTimeField::new(grid, data)?, &dir.join(name))?;
        }
        let meta = ParamsMeta {
            alpha: self.alpha,
            noise: self.noise,
            n_param_steps: self.steps.len(),
        };
        let path = dir.join("params.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Read parameters written by [`ParamFields::write`], attached to `grid`.
    pub fn read(dir: &Path, grid: Grid2D) -> Result<Self> {
        let path = dir.join("params.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ParamsMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let m = grid.n_nodes();
        let mut steps = vec![StepParams::uniform(m, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0); meta.n_param_steps];
        for (c, name) in COMPONENTS.iter().enumerate() {
            let st = read_space_time(&dir.join(name))?;
            if st.grid.n_nodes() != m || st.grid.n_steps != meta.n_param_steps {
                return Err(Error::Format(format!("{name}: raster shape does not match the grid")));
            }
            for (t, s) in steps.iter_mut().enumerate() {
                *s.component_mut(c) = st.frame(t).to_vec();
            }
        }
        Self::new(grid, steps, meta.alpha, meta.noise)
    }
}

/// Advisory numerical-stability diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub max_cfl: f64,
    pub max_peclet: f64,
    pub ok: bool,
    pub peclet_warning: bool,
}

pub fn check_stability(params: &ParamFields) -> Result<StabilityReport> {
    let g = &params.grid;
    let mut max_cfl: f64 = 0.0;
    let mut max_peclet: f64 = 0.0;
    for s in &params.steps {
        let h = s.diffusion()?;
        for k in 0..s.n_nodes() {
            max_cfl = max_cfl.max(g.dt * (s.m1[k].abs() / g.dx + s.m2[k].abs() / g.dy));
            max_peclet = max_peclet
                .max(s.m1[k].abs() * g.dx / h.h11[k])
                .max(s.m2[k].abs() * g.dy / h.h22[k]);
        }
    }
    let report = StabilityReport {
        max_cfl,
        max_peclet,
        ok: max_cfl <= CFL_LIMIT,
        peclet_warning: max_peclet > PECLET_WARN,
    };
    if !report.ok {
        log::warn!("Courant number {max_cfl:.3} exceeds {CFL_LIMIT}");
    }
    if report.peclet_warning {
        log::warn!("Peclet number {max_peclet:.3} exceeds {PECLET_WARN}");
    }
    Ok(report)
}

/// Scale velocities so that `dt (|m1|/dx + |m2|/dy) <= max_courant` at every node.
pub fn clip_velocity(params: &mut ParamFields, max_courant: f64) {
    let g = params.grid;
    for s in &mut params.steps {
        for k in 0..s.m1.len() {
            let cr = g.dt * (s.m1[k].abs() / g.dx + s.m2[k].abs() / g.dy);
            if cr > max_courant {
                let f = max_courant / cr;
                s.m1[k] *= f;
                s.m2[k] *= f;
            }
        }
    }
}

/// `softplus(raw) + 1e-6`.
pub fn positive_transform(raw: f64) -> f64 {
    raw.max(0.0) + (-raw.abs()).exp().ln_1p() + POSITIVE_FLOOR
}

/// Derivative of [`positive_transform`] (the logistic function).
pub fn positive_transform_derivative(raw: f64) -> f64 {
    if raw >= 0.0 {
        1.0 / (1.0 + (-raw).exp())
    } else {
        let e = raw.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_transform(value: f64) -> Result<f64> {
    let s = value - POSITIVE_FLOOR;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "cannot invert positive transform at {value} (floor {POSITIVE_FLOOR})"
        )));
    }
    Ok(s + (-(-s).exp_m1()).ln())
}

/// First derivative along x (`along_x`) or y, centred inside and
/// one-sided on the boundary.
fn derivative(f: &Field, along_x: bool) -> Vec<f64> {
    let g = &f.grid;
    let (n, h) = if along_x { (g.nx, g.dx) } else { (g.ny, g.dy) };
    let at = |i: usize, j: usize, s: usize| if along_x { f.at(i, s) } else { f.at(s, j) };
    let mut out = vec![0.0; g.n_nodes()];
    for i in 0..g.ny {
        for j in 0..g.nx {
            let s = if along_x { j } else { i };
            out[i * g.nx + j] = if s == 0 {
                (at(i, j, 1) - at(i, j, 0)) / h
            } else if s == n - 1 {
                (at(i, j, n - 1) - at(i, j, n - 2)) / h
            } else {
                (at(i, j, s + 1) - at(i, j, s - 1)) / (2.0 * h)
            };
        }
    }
    out
}

fn second_derivative(f: &Field, along_x: bool) -> Vec<f64> {
    let g = &f.grid;
    let (n, h) = if along_x { (g.nx, g.dx) } else { (g.ny, g.dy) };
    let at = |i: usize, j: usize, s: usize| if along_x { f.at(i, s) } else { f.at(s, j) };
    let mut out = vec![0.0; g.n_nodes()];
    for i in 0..g.ny {
        for j in 0..g.nx {
            let s = (if along_x { j } else { i }).clamp(1, n - 2);
            out[i * g.nx + j] = (at(i, j, s + 1) - 2.0 * at(i, j, s) + at(i, j, s - 1)) / (h * h);
        }
    }
    out
}

/// Derivative-based initial guess from a single state: velocities from the
/// gradient, anisotropy direction from second derivatives, κ and τ from the
/// normalized gradient magnitude, `β = 1` and `γ = 1e-2`.
pub fn init_from_field(x0: &Field, alpha: u32, noise: NoiseModel) -> Result<ParamFields> {
    if x0.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("initial field has non-finite values".into()));
    }
    let m = x0.grid.n_nodes();
    let m1 = derivative(x0, true);
    let m2 = derivative(x0, false);
    let v1 = second_derivative(x0, true);
    let v2 = second_derivative(x0, false);
    let norm: Vec<f64> = (0..m).map(|k| m1[k].hypot(m2[k])).collect();
    let mean = norm.iter().sum::<f64>() / m as f64;
    let scaled: Vec<f64> = norm
        .iter()
        .map(|&v| if mean > 0.0 { (v / mean).max(INIT_FLOOR) } else { INIT_FLOOR })
        .collect();
    let step = StepParams {
        kappa: scaled.clone(),
        m1,
        m2,
        gamma: vec![1e-2; m],
        beta: vec![1.0; m],
        v1,
        v2,
        tau: scaled,
    };
    ParamFields::stationary(x0.grid, step, alpha, noise)
}
