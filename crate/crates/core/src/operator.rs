//! Finite-difference discretization of `κ² + m·∇ − ∇·H∇` on the grid,
//! its integer powers, the implicit-Euler step matrix and the spatial noise
//! precision.
//!
//! Stencils are truncated at the domain edge (neighbours outside the grid are
//! dropped). Every in-domain stencil position is stored even when its value is
//! zero, so the sparsity pattern depends only on the grid and the scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::params::{NoiseModel, ParamFields, StepParams};
use crate::sparse::CsrMatrix;

/// Discretization of the advection term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Centered,
    /// First-order upwind.
    #[default]
    Ufdm1,
    /// Third-order upwind-biased.
    Ufdm3,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "centered" => Ok(Scheme::Centered),
            "ufdm1" => Ok(Scheme::Ufdm1),
            "ufdm3" => Ok(Scheme::Ufdm3),
            _ => Err(format!("unknown scheme '{s}' (expected centered, ufdm1 or ufdm3)")),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Centered => "centered",
            Scheme::Ufdm1 => "ufdm1",
            Scheme::Ufdm3 => "ufdm3",
        })
    }
}

/// Local coefficients entering one operator row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeCoeffs {
    pub kappa: f64,
    pub h11: f64,
    pub h12: f64,
    pub h22: f64,
    pub m1: f64,
    pub m2: f64,
}

/// Partial derivatives of an entry with respect to
/// `[κ, H11, H12, H22, m1, m2]` of its row's node.
pub type Partials = [f64; 6];

const KAPPA: usize = 0;
const H11: usize = 1;
const H12: usize = 2;
const H22: usize = 3;
const M1: usize = 4;
const M2: usize = 5;

fn unit(idx: usize, v: f64) -> Partials {
    let mut p = [0.0; 6];
    p[idx] = v;
    p
}

/// One-dimensional advection coefficients `(offset, value, d value / d m)`.
fn advection(m: f64, h: f64, scheme: Scheme) -> Vec<(isize, f64, f64)> {
    let (ap, am) = (m.max(0.0), m.min(0.0));
    let (dap, dam) = if m >= 0.0 { (1.0, 0.0) } else { (0.0, 1.0) };
    match scheme {
        Scheme::Centered => vec![(-1, -m / (2.0 * h), -1.0 / (2.0 * h)), (1, m / (2.0 * h), 1.0 / (2.0 * h))],
        Scheme::Ufdm1 => vec![
            (0, (ap - am) / h, (dap - dam) / h),
            (-1, -ap / h, -dap / h),
            (1, am / h, dam / h),
        ],
        Scheme::Ufdm3 => {
            let s = 6.0 * h;
            vec![
                (0, 3.0 * (ap - am) / s, 3.0 * (dap - dam) / s),
                (-1, -(6.0 * ap + 2.0 * am) / s, -(6.0 * dap + 2.0 * dam) / s),
                (1, (2.0 * ap + 6.0 * am) / s, (2.0 * dap + 6.0 * dam) / s),
                (-2, ap / s, dap / s),
                (2, -am / s, -dam / s),
            ]
        }
    }
}

/// Entries of the operator row at node `(i, j)` as `(column, value, partials)`,
/// sorted by column.
pub fn stencil_row(grid: &Grid2D, i: usize, j: usize, c: &NodeCoeffs, scheme: Scheme) -> Vec<(usize, f64, Partials)> {
    let (dx2, dy2, dxy) = (grid.dx * grid.dx, grid.dy * grid.dy, grid.dx * grid.dy);
    // (row offset, column offset, value, partials)
    let mut terms: Vec<(isize, isize, f64, Partials)> = Vec::with_capacity(16);
    let mut diag = [0.0; 6];
    diag[KAPPA] = 2.0 * c.kappa;
    diag[H11] = 2.0 / dx2;
    diag[H22] = 2.0 / dy2;
    terms.push((0, 0, c.kappa * c.kappa + 2.0 * (c.h11 / dx2 + c.h22 / dy2), diag));
    for s in [-1, 1] {
        terms.push((0, s, -c.h11 / dx2, unit(H11, -1.0 / dx2)));
        terms.push((s, 0, -c.h22 / dy2, unit(H22, -1.0 / dy2)));
    }
    let cross = 1.0 / (2.0 * dxy);
    for (di, dj, sign) in [(1, 1, -1.0), (-1, -1, -1.0), (1, -1, 1.0), (-1, 1, 1.0)] {
        terms.push((di, dj, sign * c.h12 * cross, unit(H12, sign * cross)));
    }
    for (off, v, d) in advection(c.m1, grid.dx, scheme) {
        terms.push((0, off, v, unit(M1, d)));
    }
    for (off, v, d) in advection(c.m2, grid.dy, scheme) {
        terms.push((off, 0, v, unit(M2, d)));
    }

    let mut out: Vec<(usize, f64, Partials)> = Vec::with_capacity(13);
    for (di, dj, v, p) in terms {
        let (ii, jj) = (i as isize + di, j as isize + dj);
        if ii < 0 || jj < 0 || ii >= grid.ny as isize || jj >= grid.nx as isize {
            continue;
        }
        let col = ii as usize * grid.nx + jj as usize;
        match out.iter_mut().find(|e| e.0 == col) {
            Some(e) => {
                e.1 += v;
                for q in 0..6 {
                    e.2[q] += p[q];
                }
            }
            None => out.push((col, v, p)),
        }
    }
    out.sort_by_key(|e| e.0);
    out
}

fn check_scheme(grid: &Grid2D, scheme: Scheme) -> Result<()> {
    if scheme == Scheme::Ufdm3 && (grid.nx < 5 || grid.ny < 5) {
        return Err(Error::InvalidParameter(format!(
            "ufdm3 needs at least 5 nodes per direction, grid is {}x{}",
            grid.nx, grid.ny
        )));
    }
    Ok(())
}

fn node_coeffs(step: &StepParams) -> Result<Vec<NodeCoeffs>> {
    let h = step.diffusion()?;
    Ok((0..step.n_nodes())
        .map(|k| NodeCoeffs {
            kappa: step.kappa[k],
            h11: h.h11[k],
            h12: h.h12[k],
            h22: h.h22[k],
            m1: step.m1[k],
            m2: step.m2[k],
        })
        .collect())
}

/// Operator from explicit per-node coefficients, with entry partials.
pub fn assemble_from_coeffs(grid: &Grid2D, coeffs: &[NodeCoeffs], scheme: Scheme) -> Result<(CsrMatrix, Vec<Partials>)> {
    check_scheme(grid, scheme)?;
    let m = grid.n_nodes();
    if coeffs.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: coeffs.len() });
    }
    let mut indptr = Vec::with_capacity(m + 1);
    let mut indices = Vec::with_capacity(13 * m);
    let mut data = Vec::with_capacity(13 * m);
    let mut partials = Vec::with_capacity(13 * m);
    indptr.push(0);
    for i in 0..grid.ny {
        for j in 0..grid.nx {
            for (col, v, p) in stencil_row(grid, i, j, &coeffs[i * grid.nx + j], scheme) {
                indices.push(col);
                data.push(v);
                partials.push(p);
            }
            indptr.push(indices.len());
        }
    }
    Ok((CsrMatrix::new(m, m, indptr, indices, data)?, partials))
}

/// Operator `A` for one parameter step, with partials of every stored entry.
pub fn operator_with_partials(grid: &Grid2D, step: &StepParams, scheme: Scheme) -> Result<(CsrMatrix, Vec<Partials>)> {
    assemble_from_coeffs(grid, &node_coeffs(step)?, scheme)
}

pub fn assemble_step_operator(grid: &Grid2D, step: &StepParams, scheme: Scheme) -> Result<CsrMatrix> {
    Ok(operator_with_partials(grid, step, scheme)?.0)
}

/// Operator `A_t` at state `t`.
pub fn assemble_operator(params: &ParamFields, t: usize, scheme: Scheme) -> Result<CsrMatrix> {
    assemble_step_operator(&params.grid, params.at(t), scheme)
}

/// `A^(alpha/2)` for even `alpha >= 2`.
pub fn operator_power(a: &CsrMatrix, alpha: u32) -> Result<CsrMatrix> {
    if !alpha.is_multiple_of(2) {
        return Err(Error::Unsupported(format!(
            "alpha = {alpha}: fractional operator powers are not supported, alpha must be even"
        )));
    }
    if alpha < 2 {
        return Err(Error::InvalidParameter(format!("alpha must be >= 2, got {alpha}")));
    }
    let mut b = a.clone();
    for _ in 1..alpha / 2 {
        b = b.matmul(a)?;
    }
    Ok(b)
}

/// `I + dt B`.
pub fn step_matrix_from_power(b: &CsrMatrix, dt: f64) -> Result<CsrMatrix> {
    CsrMatrix::identity(b.nrows()).add_scaled(1.0, b, dt)
}

/// `Minv_t = I + dt A_t^(α/2)`; the inverse is never formed.
pub fn step_matrix(params: &ParamFields, t: usize, scheme: Scheme) -> Result<CsrMatrix> {
    let b = operator_power(&assemble_operator(params, t, scheme)?, params.alpha)?;
    step_matrix_from_power(&b, params.grid.dt)
}

/// `(κ_s² − Δ)^(α_s/2)` with the centred five-point Laplacian.
pub fn spatial_noise_operator(grid: &Grid2D, kappa_s: f64, alpha_s: u32) -> Result<CsrMatrix> {
    let coeffs = vec![
        NodeCoeffs {
            kappa: kappa_s,
            h11: 1.0,
            h12: 0.0,
            h22: 1.0,
            m1: 0.0,
            m2: 0.0,
        };
        grid.n_nodes()
    ];
    let (a, _) = assemble_from_coeffs(grid, &coeffs, Scheme::Centered)?;
    operator_power(&a, alpha_s)
}

/// Spatial noise precision: `dx dy I` for white noise, `dx dy B_sᵀ B_s` otherwise.
pub fn spatial_noise_precision(grid: &Grid2D, noise: &NoiseModel) -> Result<CsrMatrix> {
    let area = grid.dx * grid.dy;
    match *noise {
        NoiseModel::White => Ok(CsrMatrix::from_diagonal(&vec![area; grid.n_nodes()])),
        NoiseModel::Colored { kappa_s, alpha_s } => {
            if !(kappa_s > 0.0) {
                return Err(Error::InvalidParameter(format!("kappa_s must be > 0, got {kappa_s}")));
            }
            let b = spatial_noise_operator(grid, kappa_s, alpha_s)?;
            Ok(b.transpose().matmul(&b)?.scaled(area))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(grid: Grid2D, kappa: f64, m1: f64, m2: f64, gamma: f64, beta: f64, v: (f64, f64)) -> ParamFields {
        let s = StepParams::uniform(grid.n_nodes(), kappa, m1, m2, gamma, beta, v.0, v.1, 1.0);
        ParamFields::stationary(grid, s, 2, NoiseModel::White).unwrap()
    }

    #[test]
    fn isotropic_centered_stencil() {
        let g = Grid2D::unit(5, 5, 1).unwrap();
        let a = assemble_operator(&uniform(g, 1.0, 0.0, 0.0, 1.0, 0.0, (0.0, 0.0)), 0, Scheme::Centered).unwrap();
        let k = 2 * 5 + 2;
        assert_eq!(a.get(k, k), 5.0);
        for n in [k - 1, k + 1, k - 5, k + 5] {
            assert_eq!(a.get(k, n), -1.0);
        }
        for n in [k - 6, k - 4, k + 4, k + 6] {
            assert_eq!(a.get(k, n), 0.0);
            assert!(a.position(k, n).is_some());
        }
    }

    #[test]
    fn cross_term_magnitude() {
        // H12 = β v1 v2 = 0.5 with v = (1, 0.5), β = 1.
        let g = Grid2D::unit(5, 5, 1).unwrap();
        let a = assemble_operator(&uniform(g, 1.0, 0.0, 0.0, 1.0, 1.0, (1.0, 0.5)), 0, Scheme::Ufdm1).unwrap();
        let k = 12;
        assert_eq!(a.get(k, k + 6), -0.25);
        assert_eq!(a.get(k, k - 6), -0.25);
        assert_eq!(a.get(k, k + 4), 0.25);
        assert_eq!(a.get(k, k - 4), 0.25);
    }

    #[test]
    fn upwind_pure_advection() {
        let g = Grid2D::unit(5, 5, 1).unwrap();
        let with = assemble_operator(&uniform(g, 1.0, 1.0, 0.0, 1.0, 0.0, (0.0, 0.0)), 0, Scheme::Ufdm1).unwrap();
        let without = assemble_operator(&uniform(g, 1.0, 0.0, 0.0, 1.0, 0.0, (0.0, 0.0)), 0, Scheme::Ufdm1).unwrap();
        let adv = with.add_scaled(1.0, &without, -1.0).unwrap();
        let k = 12;
        assert_eq!(adv.get(k, k - 1), -1.0);
        assert_eq!(adv.get(k, k + 1), 0.0);
        assert_eq!(adv.get(k, k), 1.0);
    }

    #[test]
    fn ufdm3_needs_five_nodes() {
        let g = Grid2D::unit(4, 6, 1).unwrap();
        let p = uniform(g, 1.0, 0.5, 0.0, 1.0, 0.0, (0.0, 0.0));
        assert!(assemble_operator(&p, 0, Scheme::Ufdm3).is_err());
        assert!(assemble_operator(&p, 0, Scheme::Ufdm1).is_ok());
    }

    #[test]
    fn ufdm3_interior_coefficients() {
        let g = Grid2D::new(7, 7, 0.5, 1.0, 1.0, 1).unwrap();
        let with = assemble_operator(&uniform(g, 1.0, 0.6, 0.0, 1.0, 0.0, (0.0, 0.0)), 0, Scheme::Ufdm3).unwrap();
        let without = assemble_operator(&uniform(g, 1.0, 0.0, 0.0, 1.0, 0.0, (0.0, 0.0)), 0, Scheme::Ufdm3).unwrap();
        let adv = with.add_scaled(1.0, &without, -1.0).unwrap();
        let k = 3 * 7 + 3;
        // Applied to a linear ramp the scheme is exact: m * slope.
        let ramp: Vec<f64> = (0..49).map(|q| (q % 7) as f64 * 0.5 * 2.0).collect();
        let y = adv.spmv(&ramp).unwrap();
        assert!((y[k] - 0.6 * 2.0).abs() < 1e-12);
        assert!((adv.get(k, k - 2) - 0.6 / 3.0).abs() < 1e-15);
        assert_eq!(adv.get(k, k + 2), 0.0);
    }

    #[test]
    fn zero_advection_schemes_agree() {
        let g = Grid2D::unit(6, 5, 1).unwrap();
        let p = uniform(g, 0.7, 0.0, 0.0, 1.3, 2.0, (0.3, -0.8));
        assert_eq!(
            assemble_operator(&p, 0, Scheme::Centered).unwrap(),
            assemble_operator(&p, 0, Scheme::Ufdm1).unwrap()
        );
    }

    #[test]
    fn power_examples() {
        let g = Grid2D::unit(3, 3, 1).unwrap();
        let a = assemble_operator(&uniform(g, 1.0, 0.2, -0.1, 1.0, 0.5, (0.4, 0.9)), 0, Scheme::Ufdm1).unwrap();
        assert_eq!(operator_power(&a, 2).unwrap(), a);
        let b = operator_power(&a, 4).unwrap().to_dense();
        let d = a.to_dense();
        assert!((b - &d * &d).abs().max() < 1e-12);
        let two = CsrMatrix::from_diagonal(&[2.0; 4]);
        assert_eq!(operator_power(&two, 4).unwrap(), CsrMatrix::from_diagonal(&[4.0; 4]));
        assert!(matches!(operator_power(&a, 3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn step_matrix_examples() {
        let i = CsrMatrix::identity(4);
        assert_eq!(step_matrix_from_power(&i, 0.0).unwrap(), CsrMatrix::identity(4));
        assert_eq!(step_matrix_from_power(&i, 0.5).unwrap(), CsrMatrix::from_diagonal(&[1.5; 4]));
        // Symmetric B gives eigenvalues of I + dt B at least one.
        let g = Grid2D::unit(4, 4, 1).unwrap();
        let p = uniform(g, 0.5, 0.0, 0.0, 1.0, 3.0, (0.6, 0.8));
        let minv = step_matrix(&p, 0, Scheme::Centered).unwrap().to_dense();
        let eig = minv.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= 1.0 - 1e-12));
    }

    #[test]
    fn noise_precision_examples() {
        let g = Grid2D::unit(3, 3, 1).unwrap();
        assert_eq!(spatial_noise_precision(&g, &NoiseModel::White).unwrap(), CsrMatrix::identity(9));
        let b = spatial_noise_operator(&g, 1.0, 2).unwrap();
        assert_eq!(b.get(4, 4), 5.0);
        for n in [1, 3, 5, 7] {
            assert_eq!(b.get(4, n), -1.0);
        }
        let q = spatial_noise_precision(&g, &NoiseModel::Colored { kappa_s: 1.0, alpha_s: 2 }).unwrap();
        let bd = b.to_dense();
        assert!((q.to_dense() - bd.transpose() * bd).abs().max() < 1e-14);
        assert_eq!(q.symmetry_discrepancy(), 0.0);
    }

    #[test]
    fn partials_match_finite_differences() {
        let g = Grid2D::unit(5, 5, 1).unwrap();
        let c = NodeCoeffs { kappa: 0.8, h11: 1.3, h12: 0.2, h22: 0.9, m1: 0.35, m2: -0.25 };
        for scheme in [Scheme::Centered, Scheme::Ufdm1, Scheme::Ufdm3] {
            let row = stencil_row(&g, 2, 2, &c, scheme);
            for q in 0..6 {
                let h = 1e-6;
                let bump = |d: f64| {
                    let mut cc = c;
                    let f = match q {
                        0 => &mut cc.kappa,
                        1 => &mut cc.h11,
                        2 => &mut cc.h12,
                        3 => &mut cc.h22,
                        4 => &mut cc.m1,
                        _ => &mut cc.m2,
                    };
                    *f += d;
                    stencil_row(&g, 2, 2, &cc, scheme)
                };
                let (up, dn) = (bump(h), bump(-h));
                for (e, (u, d)) in row.iter().zip(up.iter().zip(&dn)) {
                    let fd = (u.1 - d.1) / (2.0 * h);
                    assert!((e.2[q] - fd).abs() < 1e-6, "{scheme} q={q}");
                }
            }
        }
    }

    #[test]
    fn row_pattern_bounds() {
        let g = Grid2D::unit(7, 6, 1).unwrap();
        let p = uniform(g, 1.0, 0.3, 0.2, 1.0, 1.0, (0.5, 0.5));
        let a1 = assemble_operator(&p, 0, Scheme::Ufdm1).unwrap();
        let a3 = assemble_operator(&p, 0, Scheme::Ufdm3).unwrap();
        assert!((0..42).all(|k| a1.row(k).0.len() <= 9 && a3.row(k).0.len() <= 13));
        assert_eq!(a1.row(3 * 7 + 3).0.len(), 9);
        assert_eq!(a3.row(3 * 7 + 3).0.len(), 13);
        assert!(a1.diagonal().iter().all(|&d| d > 0.0));
    }

    proptest! {
        #[test]
        fn symmetric_without_advection(kappa in 0.1f64..3.0, gamma in 0.1f64..3.0, beta in 0.0f64..5.0,
                                       v1 in -1.0f64..1.0, v2 in -1.0f64..1.0, dx in 0.5f64..2.0) {
            let g = Grid2D::new(6, 5, dx, 1.0, 1.0, 1).unwrap();
            let a = assemble_operator(&uniform(g, kappa, 0.0, 0.0, gamma, beta, (v1, v2)), 0, Scheme::Ufdm1).unwrap();
            prop_assert!(a.symmetry_discrepancy() <= 1e-12);
        }

        #[test]
        fn flipped_velocity_mirrors_upwinding(m1 in -2.0f64..2.0, m2 in -2.0f64..2.0, third in any::<bool>()) {
            let scheme = if third { Scheme::Ufdm3 } else { Scheme::Ufdm1 };
            let g = Grid2D::unit(7, 7, 1).unwrap();
            let base = assemble_operator(&uniform(g, 1.0, 0.0, 0.0, 1.0, 0.0, (0.0, 0.0)), 0, scheme).unwrap();
            let adv = |s: f64| assemble_operator(&uniform(g, 1.0, s * m1, s * m2, 1.0, 0.0, (0.0, 0.0)), 0, scheme)
                .unwrap().add_scaled(1.0, &base, -1.0).unwrap();
            let (plus, minus) = (adv(1.0).transpose(), adv(-1.0));
            // Rows at least two nodes from every edge.
            for i in 2..5 {
                for j in 2..5 {
                    let k = i * 7 + j;
                    let (cols, _) = minus.row(k);
                    for &c in cols {
                        prop_assert!((plus.get(k, c) - minus.get(k, c)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
