//! Regular 2D raster geometry with a discrete time axis, state containers,
//! sparse observation sets and the portable raster format.
//!
//! Flat indexing is row-major: node `(i, j)` with row `i < ny` and column
//! `j < nx` lives at `k = i * nx + j`. Space-time vectors are time-major,
//! frame `t` occupying `t * m .. (t + 1) * m` with `m = nx * ny`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular grid in space plus a time axis of `n_steps` states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, dt: f64, n_steps: usize) -> Result<Self> {
        let grid = Grid2D {
            nx,
            ny,
            dx,
            dy,
            dt,
            n_steps,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit spacing in space and time.
    pub fn unit(nx: usize, ny: usize, n_steps: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, 1.0, 1.0, n_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.nx < 3 || self.ny < 3 {
            problems.push(format!("need nx, ny >= 3, got {}x{}", self.nx, self.ny));
        }
        if self.n_steps < 1 {
            problems.push("need n_steps >= 1".to_string());
        }
        for (name, v) in [("dx", self.dx), ("dy", self.dy), ("dt", self.dt)] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGrid(problems.join("; ")))
        }
    }

    /// Number of spatial nodes `m = nx * ny`.
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    /// Length of a full space-time vector.
    pub fn n_total(&self) -> usize {
        self.n_nodes() * self.n_steps
    }

    /// Same geometry with a different number of time steps.
    pub fn with_steps(&self, n_steps: usize) -> Self {
        Grid2D { n_steps, ..*self }
    }

    pub fn flatten(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.ny || j >= self.nx {
            return Err(Error::IndexOutOfRange {
                row: i,
                col: j,
                nx: self.nx,
                ny: self.ny,
            });
        }
        Ok(i * self.nx + j)
    }

    pub fn unflatten(&self, k: usize) -> (usize, usize) {
        (k / self.nx, k % self.nx)
    }

    /// Physical coordinates `(x, y)` of node `k`.
    pub fn coords(&self, k: usize) -> (f64, f64) {
        let (i, j) = self.unflatten(k);
        (j as f64 * self.dx, i as f64 * self.dy)
    }
}

/// One spatial frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_nodes(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("field values must be finite".into()));
        }
        Ok(Field { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Field {
            grid,
            values: vec![0.0; grid.n_nodes()],
        }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(usize, usize) -> f64) -> Self {
        let values = (0..grid.n_nodes())
            .map(|k| {
                let (i, j) = grid.unflatten(k);
                f(i, j)
            })
            .collect();
        Field { grid, values }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.nx + j]
    }
}

/// A sequence of `grid.n_steps` frames stored as one time-major vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub grid: Grid2D,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn new(grid: Grid2D, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.n_total() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_total(),
                found: data.len(),
            });
        }
        Ok(SpaceTimeField { grid, data })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        SpaceTimeField {
            grid,
            data: vec![0.0; grid.n_total()],
        }
    }

    pub fn from_frames(frames: &[Field]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidParameter("no frames".into()))?;
        let grid = first.grid.with_steps(frames.len());
        let mut data = Vec::with_capacity(grid.n_total());
        for f in frames {
            if f.grid.nx != grid.nx || f.grid.ny != grid.ny {
                return Err(Error::InvalidParameter("frames use different grids".into()));
            }
            data.extend_from_slice(&f.values);
        }
        Ok(SpaceTimeField { grid, data })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let m = self.grid.n_nodes();
        &self.data[t * m..(t + 1) * m]
    }

    pub fn frame_field(&self, t: usize) -> Field {
        Field {
            grid: self.grid,
            values: self.frame(t).to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// A single scalar observation at a flat space-time index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub index: usize,
    pub value: f64,
    pub noise_var: f64,
}

/// Observations stored as sorted `(index, value, variance)` triples.
/// The observation operator is the sampling (masking) operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSet {
    pub grid: Grid2D,
    obs: Vec<Observation>,
}

impl ObsSet {
    pub fn new(grid: Grid2D, mut obs: Vec<Observation>) -> Result<Self> {
        let n = grid.n_total();
        for o in &obs {
            if o.index >= n {
                return Err(Error::InvalidParameter(format!(
                    "observation index {} outside state of size {n}",
                    o.index
                )));
            }
            if !(o.noise_var >= 0.0) || !o.value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "observation at {} has invalid value/variance",
                    o.index
                )));
            }
        }
        obs.sort_by_key(|o| o.index);
        if obs.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(Error::InvalidParameter("duplicate observation index".into()));
        }
        Ok(ObsSet { grid, obs })
    }

    pub fn empty(grid: Grid2D) -> Self {
        ObsSet {
            grid,
            obs: Vec::new(),
        }
    }

    /// Sample `state` at the masked nodes, adding Gaussian noise of variance
    /// `noise_var` (none when `noise_var == 0`).
    pub fn from_masks(
        state: &SpaceTimeField,
        masks: &[Vec<bool>],
        noise_var: f64,
        seed: u64,
    ) -> Result<Self> {
        let grid = state.grid;
        if masks.len() != grid.n_steps || masks.iter().any(|m| m.len() != grid.n_nodes()) {
            return Err(Error::DimensionMismatch {
                expected: grid.n_total(),
                found: masks.iter().map(Vec::len).sum(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = noise_var.max(0.0).sqrt();
        let m = grid.n_nodes();
        let mut obs = Vec::new();
        for (t, mask) in masks.iter().enumerate() {
            for (k, &on) in mask.iter().enumerate() {
                if on {
                    let index = t * m + k;
                    let noise: f64 = if sd > 0.0 {
                        sd * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    obs.push(Observation {
                        index,
                        value: state.as_slice()[index] + noise,
                        noise_var,
                    });
                }
            }
        }
        Self::new(grid, obs)
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.obs.iter()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// Same locations and variances with replaced values.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.obs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.obs.len(),
                found: values.len(),
            });
        }
        let obs = self
            .obs
            .iter()
            .zip(values)
            .map(|(o, &value)| Observation { value, ..*o })
            .collect();
        Ok(ObsSet {
            grid: self.grid,
            obs,
        })
    }

    /// `H x`: the state sampled at the observed indices.
    pub fn sample(&self, x: &[f64]) -> Vec<f64> {
        self.obs.iter().map(|o| x[o.index]).collect()
    }

    /// Boolean mask for time step `t`.
    pub fn mask(&self, t: usize) -> Vec<bool> {
        let m = self.grid.n_nodes();
        let mut mask = vec![false; m];
        for o in &self.obs {
            if o.index / m == t {
                mask[o.index % m] = true;
            }
        }
        mask
    }

    /// Fraction of space-time nodes carrying an observation.
    pub fn coverage(&self) -> f64 {
        self.obs.len() as f64 / self.grid.n_total() as f64
    }
}

/// Geometry of synthetic satellite-like swaths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    /// Swath width in nodes.
    pub swath_width: f64,
    /// Distance between consecutive swaths in nodes.
    pub spacing: f64,
    pub angle_deg: f64,
    /// Shift of the swath pattern per time step, in nodes.
    pub phase_per_step: f64,
    pub seed: u64,
}

/// Parallel oblique swaths drifting with time. A node is observed when its
/// coordinate across the swath direction, shifted by a seeded phase, falls in
/// `[0, swath_width)` modulo `spacing`.
pub fn make_track_mask(grid: &Grid2D, n_steps: usize, cfg: &TrackConfig) -> Result<Vec<Vec<bool>>> {
    if !(cfg.swath_width > 0.0 && cfg.swath_width < cfg.spacing) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < swath_width < spacing, got {} and {}",
            cfg.swath_width, cfg.spacing
        )));
    }
    if cfg.spacing >= grid.nx.min(grid.ny) as f64 {
        return Err(Error::InvalidParameter(format!(
            "track spacing {} must be below min(nx, ny) = {}",
            cfg.spacing,
            grid.nx.min(grid.ny)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase0: f64 = rng.gen_range(0.0..cfg.spacing);
    let (sin, cos) = cfg.angle_deg.to_radians().sin_cos();
    let masks = (0..n_steps)
        .map(|t| {
            let shift = phase0 + t as f64 * cfg.phase_per_step;
            (0..grid.n_nodes())
                .map(|k| {
                    let (i, j) = grid.unflatten(k);
                    let across = j as f64 * cos + i as f64 * sin + shift;
                    across.rem_euclid(cfg.spacing) < cfg.swath_width
                })
                .collect()
        })
        .collect();
    Ok(masks)
}

/// JSON header of the raster format; the payload is raw little-endian `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub nx: usize,
    pub ny: usize,
    pub n_steps: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub dtype: String,
    /// Frames in the payload; defaults to `n_steps` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

impl RasterHeader {
    fn grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.nx, self.ny, self.dx, self.dy, self.dt, self.n_steps)
            .map_err(|e| Error::Format(format!("bad raster header: {e}")))
    }

    fn frames(&self) -> usize {
        self.frames.unwrap_or(self.n_steps)
    }
}

/// Header and payload paths for a raster named by `path`
/// (`name.json` + `name.bin`).
pub fn raster_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

fn write_raster_raw(grid: &Grid2D, frames: usize, values: &[f64], path: &Path) -> Result<()> {
    let (hpath, bpath) = raster_paths(path);
    let header = RasterHeader {
        nx: grid.nx,
        ny: grid.ny,
        n_steps: grid.n_steps,
        dx: grid.dx,
        dy: grid.dy,
        dt: grid.dt,
        dtype: "f64le".into(),
        frames: (frames != grid.n_steps).then_some(frames),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))?;
    let file = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&bpath, e))
}

fn read_raster_raw(path: &Path) -> Result<(Grid2D, usize, Vec<f64>)> {
    let (hpath, bpath) = raster_paths(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: RasterHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", hpath.display())))?;
    if header.dtype != "f64le" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype {:?}",
            hpath.display(),
            header.dtype
        )));
    }
    let grid = header.grid()?;
    let frames = header.frames();
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected = grid.n_nodes() * frames;
    if bytes.len() % 8 != 0 || bytes.len() / 8 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() / 8,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        log::warn!("{}: {bad} non-finite values", bpath.display());
    }
    Ok((grid, frames, values))
}

/// Write a single frame.
pub fn write_field(field: &Field, path: &Path) -> Result<()> {
    write_raster_raw(&field.grid, 1, &field.values, path)
}

/// Read a single frame. Non-finite values are kept and reported as a warning.
pub fn read_field(path: &Path) -> Result<Field> {
    let (grid, frames, values) = read_raster_raw(path)?;
    if frames != 1 {
        return Err(Error::Format(format!(
            "{}: expected one frame, found {frames}",
            path.display()
        )));
    }
    Ok(Field { grid, values })
}

pub fn write_space_time(field: &SpaceTimeField, path: &Path) -> Result<()> {
    write_raster_raw(&field.grid, field.grid.n_steps, field.as_slice(), path)
}

pub fn read_space_time(path: &Path) -> Result<SpaceTimeField> {
    let (grid, frames, values) = read_raster_raw(path)?;
    let grid = grid.with_steps(frames);
    Ok(SpaceTimeField { grid, data: values })
}

/// Write boolean masks (one per step) as a 0/1 raster.
pub fn write_masks(grid: &Grid2D, masks: &[Vec<bool>], path: &Path) -> Result<()> {
    let values: Vec<f64> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    write_raster_raw(&grid.with_steps(masks.len()), masks.len(), &values, path)
}

pub fn read_masks(path: &Path) -> Result<(Grid2D, Vec<Vec<bool>>)> {
    let st = read_space_time(path)?;
    let m = st.grid.n_nodes();
    let masks = st
        .as_slice()
        .chunks(m)
        .map(|c| c.iter().map(|&v| v != 0.0).collect())
        .collect();
    Ok((st.grid, masks))
}

/// Largest field accepted by the CSV route.
pub const CSV_MAX_NODES: usize = 10_000;

/// Write a frame as CSV, one grid row per line.
pub fn write_field_csv(field: &Field, path: &Path) -> Result<()> {
    if field.grid.n_nodes() > CSV_MAX_NODES {
        return Err(Error::Unsupported(format!(
            "CSV output is limited to {CSV_MAX_NODES} nodes"
        )));
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in field.values.chunks(field.grid.nx) {
        // `{:?}` prints the shortest representation that parses back exactly
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a CSV frame; spacing is supplied by the caller.
pub fn read_field_csv(path: &Path, dx: f64, dy: f64, dt: f64) -> Result<Field> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    let mut nx = None;
    let mut ny = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match nx {
            None => nx = Some(rec.len()),
            Some(n) if n != rec.len() => {
                return Err(Error::Format(format!("{}: ragged rows", path.display())))
            }
            _ => {}
        }
        for cell in rec.iter() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {cell:?}", path.display())))?;
            values.push(v);
        }
        ny += 1;
    }
    let grid = Grid2D::new(nx.unwrap_or(0), ny, dx, dy, dt, 1)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if values.len() > CSV_MAX_NODES {
        return Err(Error::Unsupported(format!(
            "CSV input is limited to {CSV_MAX_NODES} nodes"
        )));
    }
    Ok(Field { grid, values })
}
