//! Conditional simulation of posterior members, ensemble statistics and
//! probabilistic scores.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::engine::{sample_from_precision_rng, Posterior};
use crate::error::{Error, Result};
use crate::grid::SpaceTimeField;
use crate::par;
use crate::precision::DENSE_CAP;
use crate::sparse::CholeskyFactor;

/// Generator of member `index`: the base seed selects the key, the member
/// index selects an independent stream.
pub fn member_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

/// Inputs shared by all members: the interpolated state, the factored prior
/// and posterior precisions and the background.
#[derive(Debug, Clone, Copy)]
pub struct Conditioner<'a> {
    pub x_star: &'a [f64],
    pub prior: &'a CholeskyFactor,
    pub posterior: &'a Posterior,
    pub xb: &'a [f64],
}

/// A conditioned member with the pieces it was built from.
#[derive(Debug, Clone)]
pub struct Member {
    pub value: Vec<f64>,
    /// Unconditional draw `x_i`.
    pub prior_draw: Vec<f64>,
    /// Interpolation `x̂_i` of the pseudo-observations of `x_i`.
    pub reinterpolated: Vec<f64>,
}

impl Conditioner<'_> {
    /// `x★ + x_i − x̂_i` using the generator `rng`.
    pub fn member_rng(&self, rng: &mut ChaCha8Rng) -> Result<Member> {
        let xi = sample_from_precision_rng(self.prior, self.xb, rng)?;
        let pseudo: Vec<f64> = self
            .posterior
            .obs
            .iter()
            .map(|o| xi[o.index] + o.noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let xhat = self.posterior.interpolate(self.xb, &pseudo)?;
        let value = self.x_star.iter().zip(&xi).zip(&xhat).map(|((s, a), b)| s + a - b).collect();
        Ok(Member { value, prior_draw: xi, reinterpolated: xhat })
    }

    pub fn member(&self, base_seed: u64, index: u64) -> Result<Member> {
        self.member_rng(&mut member_rng(base_seed, index))
    }
}

/// Conditioned members sharing one configuration.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Vec<f64>>,
    pub x_star: Vec<f64>,
    pub base_seed: u64,
}

impl Ensemble {
    /// Draw `n` members in parallel; each depends only on its own stream.
    pub fn generate(cond: &Conditioner, n: usize, base_seed: u64) -> Result<Self> {
        let members = par::try_map_range(n, |i| cond.member(base_seed, i as u64).map(|m| m.value))?;
        Ok(Ensemble { members, x_star: cond.x_star.to_vec(), base_seed })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member values at state index `k`.
    pub fn values_at(&self, k: usize) -> Vec<f64> {
        self.members.iter().map(|m| m[k]).collect()
    }
}

/// Pointwise ensemble mean and unbiased standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean and standard deviation (divisor `N − 1`) of member vectors.
pub fn ensemble_stats(members: &[Vec<f64>]) -> Result<EnsembleStats> {
    let n = members.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("ensemble statistics need at least 2 members, got {n}")));
    }
    let dim = members[0].len();
    if let Some(bad) = members.iter().find(|m| m.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: bad.len() });
    }
    let mut mean = vec![0.0; dim];
    for m in members {
        mean.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut var = vec![0.0; dim];
    for m in members {
        var.iter_mut().zip(m.iter().zip(&mean)).for_each(|(a, (v, mu))| *a += (v - mu).powi(2));
    }
    let std = var.into_iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
    Ok(EnsembleStats { mean, std })
}

/// Dense sample covariance `X Xᵀ` with `X = (x_i − x★)/√(N−1)` around `center`.
pub fn ensemble_covariance(members: &[Vec<f64>], center: &[f64]) -> Result<DMatrix<f64>> {
    let n = members.len();
    if n < 2 {
        return Err(Error::InvalidParameter("covariance needs at least 2 members".into()));
    }
    let dim = center.len();
    if dim > DENSE_CAP {
        return Err(Error::Unsupported(format!("dense covariance of size {dim} exceeds cap {DENSE_CAP}")));
    }
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let x = DMatrix::from_fn(dim, n, |k, i| (members[i][k] - center[k]) * scale);
    Ok(&x * x.transpose())
}

/// Closed-form CRPS of the empirical distribution of `members` at `y`:
/// `mean|X − y| − ½ mean|X − X′|`.
pub fn crps(members: &[f64], y: f64) -> Result<f64> {
    let n = members.len();
    if n == 0 {
        return Err(Error::InvalidParameter("CRPS of an empty ensemble".into()));
    }
    let nf = n as f64;
    let spread_to_obs = members.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{i,j} |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i).
    let pair_sum: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - nf + 1.0) * x).sum::<f64>() * 2.0;
    Ok((spread_to_obs - pair_sum / (2.0 * nf * nf)).max(0.0))
}

/// CRPS at every state index against `truth`.
pub fn crps_map(ens: &Ensemble, truth: &[f64]) -> Result<Vec<f64>> {
    let dim = ens.x_star.len();
    if truth.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: truth.len() });
    }
    par::try_map_range(dim, |k| crps(&ens.values_at(k), truth[k]))
}

/// Per-frame reconstruction scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NrmseReport {
    pub rmse: Vec<f64>,
    /// `1 − RMSE/σ_truth` per frame; `None` where the truth frame is constant.
    pub score: Vec<Option<f64>>,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub mean_score: Option<f64>,
}

fn summarize(rmse: Vec<f64>, score: Vec<Option<f64>>) -> NrmseReport {
    let n = rmse.len() as f64;
    let mean_rmse = rmse.iter().sum::<f64>() / n;
    let std_rmse = (rmse.iter().map(|r| (r - mean_rmse).powi(2)).sum::<f64>() / n).sqrt();
    let defined: Vec<f64> = score.iter().flatten().copied().collect();
    let mean_score = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    NrmseReport { rmse, score, mean_rmse, std_rmse, mean_score }
}

fn check_shapes(estimate: &SpaceTimeField, truth: &SpaceTimeField) -> Result<()> {
    if estimate.grid != truth.grid {
        return Err(Error::DimensionMismatch { expected: truth.as_slice().len(), found: estimate.as_slice().len() });
    }
    Ok(())
}

/// Frame-wise RMSE and normalized score from the definitions.
pub fn nrmse(estimate: &SpaceTimeField, truth: &SpaceTimeField) -> Result<NrmseReport> {
    check_shapes(estimate, truth)?;
    let steps = truth.grid.n_steps;
    let m = truth.grid.n_nodes() as f64;
    let mut rmse = Vec::with_capacity(steps);
    let mut score = Vec::with_capacity(steps);
    for t in 0..steps {
        let (e, y) = (estimate.frame(t), truth.frame(t));
        let r = (e.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m).sqrt();
        let mu = y.iter().sum::<f64>() / m;
        let sd = (y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m).sqrt();
        rmse.push(r);
        score.push((sd > 0.0).then(|| 1.0 - r / sd));
    }
    Ok(summarize(rmse, score))
}

/// Same scores through single-pass Welford accumulation.
pub fn nrmse_streaming(estimate: &SpaceTimeField, truth: &SpaceTimeField) -> Result<NrmseReport> {
    check_shapes(estimate, truth)?;
    let steps = truth.grid.n_steps;
    let mut rmse = Vec::with_capacity(steps);
    let mut score = Vec::with_capacity(steps);
    for t in 0..steps {
        let (mut count, mut sq, mut mean, mut m2) = (0.0, 0.0, 0.0, 0.0);
        for (a, b) in estimate.frame(t).iter().zip(truth.frame(t)) {
            count += 1.0;
            sq += (a - b) * (a - b);
            let delta = b - mean;
            mean += delta / count;
            m2 += delta * (b - mean);
        }
        let r = (sq / count).sqrt();
        let sd = (m2 / count).sqrt();
        rmse.push(r);
        score.push((sd > 0.0).then(|| 1.0 - r / sd));
    }
    Ok(summarize(rmse, score))
}

/// Root-mean-square difference over the whole space-time state.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid2D, ObsSet, Observation};
    use crate::operator::Scheme;
    use crate::params::ParamFields;
    use crate::precision::{build_joint_precision, build_p0_precision, P0Mode};
    use crate::sparse::Ordering;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn crps_quadrature(members: &[f64], y: f64) -> f64 {
        let lo = members.iter().copied().fold(y, f64::min) - 1.0;
        let hi = members.iter().copied().fold(y, f64::max) + 1.0;
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let n = members.len() as f64;
        (0..steps)
            .map(|s| {
                let z = lo + (s as f64 + 0.5) * h;
                let f = members.iter().filter(|&&x| x <= z).count() as f64 / n;
                let ind = if z >= y { 1.0 } else { 0.0 };
                (f - ind).powi(2) * h
            })
            .sum()
    }

    #[test]
    fn crps_analytic_cases() {
        assert_eq!(crps(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert_eq!(crps(&[0.0, 1.0], 0.0).unwrap(), 0.25);
        assert_eq!(crps(&[1.5], -0.5).unwrap(), 2.0);
        assert!(crps(&[], 0.0).is_err());
    }

    #[test]
    fn crps_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let members: Vec<f64> = (0..50).map(|_| Rng::sample(&mut rng, StandardNormal)).collect();
        for y in [-0.7, 0.1, 1.9] {
            assert!((crps(&members, y).unwrap() - crps_quadrature(&members, y)).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn crps_is_nonnegative(members in prop::collection::vec(-10.0f64..10.0, 1..30), y in -10.0f64..10.0) {
            prop_assert!(crps(&members, y).unwrap() >= 0.0);
        }

        #[test]
        fn crps_one_member_is_absolute_error(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            prop_assert!((crps(&[x], y).unwrap() - (x - y).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_of_identical_and_symmetric_pairs() {
        let a = vec![1.0, -2.0, 3.0];
        let s = ensemble_stats(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(s.std, vec![0.0; 3]);
        let d = [0.5, -1.5, 2.0];
        let plus: Vec<f64> = a.iter().zip(d).map(|(x, d)| x + d).collect();
        let minus: Vec<f64> = a.iter().zip(d).map(|(x, d)| x - d).collect();
        let s = ensemble_stats(&[plus, minus]).unwrap();
        for k in 0..3 {
            assert!((s.mean[k] - a[k]).abs() < 1e-15);
            assert!((s.std[k] - d[k].abs() * 2f64.sqrt()).abs() < 1e-15);
        }
        assert!(ensemble_stats(&[a]).is_err());
    }

    #[test]
    fn nrmse_definitions() {
        let g = Grid2D::unit(3, 3, 2).unwrap();
        let truth = SpaceTimeField::new(g, (0..18).map(|k| (k as f64).sin()).collect()).unwrap();
        let same = nrmse(&truth, &truth).unwrap();
        assert!(same.rmse.iter().all(|&r| r == 0.0));
        assert!(same.score.iter().all(|&s| s == Some(1.0)));
        let shifted = SpaceTimeField::new(g, truth.as_slice().iter().map(|v| v + 0.3).collect()).unwrap();
        assert!(nrmse(&shifted, &truth).unwrap().rmse.iter().all(|r| (r - 0.3).abs() < 1e-15));
        let flat = SpaceTimeField::new(g, vec![1.0; 18]).unwrap();
        assert!(nrmse(&shifted, &flat).unwrap().score.iter().all(Option::is_none));
    }

    #[test]
    fn nrmse_two_routes_agree() {
        let g = Grid2D::unit(5, 4, 3).unwrap();
        let truth = SpaceTimeField::new(g, (0..60).map(|k| (k as f64 * 0.37).sin() * 3.0 + 1e3).collect()).unwrap();
        let est = SpaceTimeField::new(g, truth.as_slice().iter().enumerate().map(|(k, v)| v + (k as f64).cos() * 0.2).collect()).unwrap();
        let a = nrmse(&est, &truth).unwrap();
        let b = nrmse_streaming(&est, &truth).unwrap();
        for (x, y) in a.score.iter().zip(&b.score) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
        }
        for (x, y) in a.rmse.iter().zip(&b.rmse) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn setup(r: f64) -> (Vec<f64>, CholeskyFactor, Posterior, ObsSet) {
        let g = Grid2D::unit(3, 3, 2).unwrap();
        let p = ParamFields::isotropic(g, 1.0, 1.0, 1.0, 2).unwrap();
        let p0 = build_p0_precision(&p, Scheme::Ufdm1, P0Mode::Innovation).unwrap();
        let q = build_joint_precision(&p, Scheme::Ufdm1, &p0).unwrap().q;
        let obs = ObsSet::new(g, [1usize, 4, 11, 16].iter().map(|&index| Observation { index, value: 0.5 * index as f64, noise_var: r }).collect()).unwrap();
        let prior = CholeskyFactor::factorize(&q, Ordering::default()).unwrap();
        let oi = crate::engine::optimal_interpolate(&q, &obs, &[0.0; 18]).unwrap();
        (oi.x, prior, oi.posterior, obs)
    }

    #[test]
    fn members_honor_data_in_noiseless_limit() {
        let (xs, prior, post, obs) = setup(1e-10);
        let cond = Conditioner { x_star: &xs, prior: &prior, posterior: &post, xb: &[0.0; 18] };
        let m = cond.member(3, 0).unwrap();
        for o in obs.iter() {
            assert!((m.value[o.index] - xs[o.index]).abs() < 1e-3);
        }
        assert_eq!(cond.member(3, 0).unwrap().value, m.value);
        assert_ne!(cond.member(3, 1).unwrap().value, m.value);
    }

    #[test]
    fn generation_is_order_independent() {
        let (xs, prior, post, _) = setup(0.1);
        let cond = Conditioner { x_star: &xs, prior: &prior, posterior: &post, xb: &[0.0; 18] };
        let e = Ensemble::generate(&cond, 6, 9).unwrap();
        for (i, m) in e.members.iter().enumerate() {
            assert_eq!(*m, cond.member(9, i as u64).unwrap().value);
        }
    }

    #[test]
    fn covariance_of_two_members() {
        let c = ensemble_covariance(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[0.0, 0.0]).unwrap();
        assert_eq!(c[(0, 0)], 2.0);
        assert_eq!(c[(1, 1)], 0.0);
    }
}
