//! Dense reference computations for small instances: the generative-matrix
//! form of the prior precision, covariance-form interpolation and dense
//! posterior variances.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::ObsSet;
use crate::operator::{assemble_step_operator, spatial_noise_precision, Scheme};
use crate::params::ParamFields;
use crate::precision::DENSE_CAP;

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        return Err(Error::Unsupported(format!("dense oracle needs {n} unknowns, cap is {cap}")));
    }
    Ok(())
}

fn dense_power(a: &DMatrix<f64>, p: u32) -> DMatrix<f64> {
    (0..p).fold(DMatrix::identity(a.nrows(), a.ncols()), |acc, _| acc * a)
}

/// Dense propagator `(I + dt A^(α/2))⁻¹` of step `t`.
pub fn dense_propagator(params: &ParamFields, t: usize, scheme: Scheme) -> Result<DMatrix<f64>> {
    if !params.alpha.is_multiple_of(2) {
        return Err(Error::Unsupported("odd alpha".into()));
    }
    let a = assemble_step_operator(&params.grid, params.at(t), scheme)?.to_dense();
    let m = a.nrows();
    let minv = DMatrix::identity(m, m) + dense_power(&a, params.alpha / 2) * params.grid.dt;
    minv.try_inverse().ok_or_else(|| Error::InvalidParameter("singular step matrix".into()))
}

/// Lower-triangular generative matrix `M_G` mapping `(x_0, z_1, …, z_L)` to the
/// trajectory, with `x_k = M_k x_{k−1} + √dt M_k τ_k L_s⁻ᵀ z_k` and `Q_s = L_s L_sᵀ`.
pub fn generative_matrix(params: &ParamFields, scheme: Scheme) -> Result<DMatrix<f64>> {
    let g = params.grid;
    let m = g.n_nodes();
    let steps = g.n_steps;
    check_cap(m * steps, DENSE_CAP)?;
    let qs = spatial_noise_precision(&g, &params.noise)?.to_dense();
    let ls = qs.cholesky().ok_or_else(|| Error::InvalidParameter("noise precision not SPD".into()))?.l();
    let ls_inv_t = ls.transpose().try_inverse().ok_or_else(|| Error::InvalidParameter("singular noise factor".into()))?;
    let mut mg = DMatrix::zeros(m * steps, m * steps);
    mg.view_mut((0, 0), (m, m)).copy_from(&DMatrix::identity(m, m));
    for k in 1..steps {
        let mk = dense_propagator(params, k, scheme)?;
        let tau = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&params.at(k).tau));
        let tk = &mk * tau * &ls_inv_t * g.dt.sqrt();
        // Row block k = M_k · row block k−1, plus T_k in column block k.
        let prev = mg.view((m * (k - 1), 0), (m, m * steps)).into_owned();
        mg.view_mut((m * k, 0), (m, m * steps)).copy_from(&(&mk * prev));
        mg.view_mut((m * k, m * k), (m, m)).copy_from(&tk);
    }
    Ok(mg)
}

/// `M_G⁻ᵀ diag(P₀⁻¹, I, …) M_G⁻¹`.
pub fn dense_prior_precision(params: &ParamFields, scheme: Scheme, p0inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mg = generative_matrix(params, scheme)?;
    let n = mg.nrows();
    let m = params.grid.n_nodes();
    let mg_inv = mg.try_inverse().ok_or_else(|| Error::InvalidParameter("singular generative matrix".into()))?;
    let mut d = DMatrix::identity(n, n);
    d.view_mut((0, 0), (m, m)).copy_from(p0inv);
    let q = mg_inv.transpose() * d * mg_inv;
    Ok((&q + q.transpose()) * 0.5)
}

fn obs_parts(obs: &ObsSet, xb: &[f64]) -> (Vec<usize>, DMatrix<f64>, nalgebra::DVector<f64>) {
    let idx: Vec<usize> = obs.iter().map(|o| o.index).collect();
    let r = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(idx.len(), obs.iter().map(|o| o.noise_var)));
    let innov = nalgebra::DVector::from_iterator(idx.len(), obs.iter().map(|o| o.value - xb[o.index]));
    (idx, r, innov)
}

/// Covariance-form interpolation `x★ = x_b + P Hᵀ (H P Hᵀ + R)⁻¹ (y − H x_b)`.
pub fn covariance_oi(cov: &DMatrix<f64>, obs: &ObsSet, xb: &[f64]) -> Result<Vec<f64>> {
    let n = cov.nrows();
    if xb.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: xb.len() });
    }
    if obs.is_empty() {
        return Ok(xb.to_vec());
    }
    let (idx, r, innov) = obs_parts(obs, xb);
    let p_xy = cov.select_columns(&idx);
    let p_yy = p_xy.select_rows(&idx) + r;
    let w = p_yy
        .lu()
        .solve(&innov)
        .ok_or_else(|| Error::InvalidParameter("singular innovation covariance".into()))?;
    let d = p_xy * w;
    Ok(xb.iter().zip(d.iter()).map(|(a, b)| a + b).collect())
}

/// `Q + Hᵀ R⁻¹ H` in dense form.
pub fn dense_posterior_precision(q: &DMatrix<f64>, obs: &ObsSet) -> DMatrix<f64> {
    let mut post = q.clone();
    for o in obs.iter() {
        post[(o.index, o.index)] += 1.0 / o.noise_var;
    }
    post
}

/// Marginal variances `diag(A⁻¹)` of a dense SPD precision.
pub fn dense_marginal_variances(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_cap(a.nrows(), DENSE_CAP)?;
    let inv = a
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })?
        .inverse();
    Ok(inv.diagonal().iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid2D, Observation};
    use crate::params::{NoiseModel, StepParams};

    #[test]
    fn generative_matrix_is_lower_block_triangular() {
        let g = Grid2D::unit(3, 3, 3).unwrap();
        let p = ParamFields::stationary(g, StepParams::uniform(9, 1.0, 0.1, 0.2, 1.0, 0.0, 1.0, 0.0, 1.0), 2, NoiseModel::White).unwrap();
        let mg = generative_matrix(&p, Scheme::Ufdm1).unwrap();
        for i in 0..27 {
            for j in 0..27 {
                if j / 9 > i / 9 {
                    assert_eq!(mg[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn covariance_oi_scalar() {
        let g = Grid2D::unit(3, 3, 1).unwrap();
        let cov = DMatrix::identity(9, 9) * 3.0;
        let obs = ObsSet::new(g, vec![Observation { index: 4, value: 2.0, noise_var: 1.0 }]).unwrap();
        let x = covariance_oi(&cov, &obs, &[0.0; 9]).unwrap();
        assert!((x[4] - 1.5).abs() < 1e-15);
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn cap_is_enforced() {
        let g = Grid2D::unit(30, 30, 6).unwrap();
        let p = ParamFields::isotropic(g, 1.0, 1.0, 1.0, 2).unwrap();
        assert!(matches!(generative_matrix(&p, Scheme::Ufdm1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sparse_assembly_matches_generative_form() {
        use crate::precision::{build_joint_precision, build_p0_precision, P0Mode};
        let g = Grid2D::unit(3, 4, 3).unwrap();
        let mut step = StepParams::uniform(12, 0.8, 0.3, -0.2, 1.0, 2.0, 0.6, 0.8, 1.0);
        step.tau.iter_mut().enumerate().for_each(|(k, t)| *t = 0.7 + 0.05 * k as f64);
        for noise in [NoiseModel::White, NoiseModel::Colored { kappa_s: 1.5, alpha_s: 2 }] {
            let p = ParamFields::stationary(g, step.clone(), 2, noise).unwrap();
            let p0 = build_p0_precision(&p, Scheme::Ufdm1, P0Mode::Recursion { n_stab: 30 }).unwrap();
            let q = build_joint_precision(&p, Scheme::Ufdm1, &p0).unwrap().q.to_dense();
            let d = dense_prior_precision(&p, Scheme::Ufdm1, &p0.to_dense()).unwrap();
            assert!((&q - &d).norm() / d.norm() < 1e-10, "{}", (&q - &d).norm() / d.norm());
        }
    }
}
