use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spdegp::engine::{optimal_interpolate, sample_from_precision_rng, PriorSimulator};
use spdegp::ensemble::{crps, member_rng};
use spdegp::grid::{read_space_time, write_space_time};
use spdegp::operator::Scheme;
use spdegp::oracle::{covariance_oi, dense_marginal_variances, dense_posterior_precision};
use spdegp::params::{NoiseModel, ParamFields, StepParams};
use spdegp::precision::{build_joint_precision, build_p0_precision, JointPrecision, P0Mode};
use spdegp::{CholeskyFactor, Grid2D, ObsSet, Observation, Ordering, SpaceTimeField};

fn params_from(grid: Grid2D, v: &[f64; 8], alpha: u32) -> ParamFields {
    let step = StepParams::uniform(grid.n_nodes(), v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
    ParamFields::stationary(grid, step, alpha, NoiseModel::White).unwrap()
}

fn joint(params: &ParamFields, scheme: Scheme) -> JointPrecision {
    let p0 = build_p0_precision(params, scheme, P0Mode::Recursion { n_stab: 40 }).unwrap();
    build_joint_precision(params, scheme, &p0).unwrap()
}

fn theta_strategy() -> impl Strategy<Value = [f64; 8]> {
    (0.3..1.5f64, -0.4..0.4f64, -0.4..0.4f64, 0.3..1.5f64, 0.0..2.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.5..1.5f64)
        .prop_map(|(a, b, c, d, e, f, g, h)| [a, b, c, d, e, f, g, h])
}

fn scheme_strategy() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Centered), Just(Scheme::Ufdm1)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn joint_precision_is_symmetric_positive_definite(theta in theta_strategy(), scheme in scheme_strategy(), alpha in prop_oneof![Just(2u32), Just(4u32)]) {
        let grid = Grid2D::unit(4, 3, 3).unwrap();
        let jp = joint(&params_from(grid, &theta, alpha), scheme);
        prop_assert!(jp.q.symmetry_discrepancy() <= 1e-12);
        prop_assert!(jp.is_block_tridiagonal());
        let factor = CholeskyFactor::factorize(&jp.q, Ordering::default()).unwrap();
        prop_assert!((factor.logdet() - jp.logdet_from_blocks()).abs() <= 1e-8 * factor.logdet().abs().max(1.0));
    }

    #[test]
    fn observations_never_increase_marginal_variance(theta in theta_strategy(), seed in 0u64..1000) {
        let grid = Grid2D::unit(3, 4, 3).unwrap();
        let q = joint(&params_from(grid, &theta, 2), Scheme::Ufdm1).q.to_dense();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<Observation> = (0..grid.n_total())
            .filter(|_| rng.gen_bool(0.4))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|index| Observation { index, value: 0.0, noise_var: rng.gen_range(0.01..1.0) })
            .collect();
        let obs = ObsSet::new(grid, obs).unwrap();
        let prior = dense_marginal_variances(&q).unwrap();
        let post = dense_marginal_variances(&dense_posterior_precision(&q, &obs)).unwrap();
        for (p, a) in prior.iter().zip(&post) {
            prop_assert!(*a <= *p * (1.0 + 1e-10));
        }
    }

    #[test]
    fn precision_and_covariance_forms_agree(theta in theta_strategy(), seed in 0u64..1000) {
        let grid = Grid2D::unit(4, 4, 2).unwrap();
        let q = joint(&params_from(grid, &theta, 2), Scheme::Ufdm1).q;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_total();
        let xb: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obs: Vec<Observation> = (0..n)
            .step_by(3)
            .map(|index| Observation { index, value: rng.gen_range(-1.0..1.0), noise_var: 0.1 })
            .collect();
        let obs = ObsSet::new(grid, obs).unwrap();
        let x = optimal_interpolate(&q, &obs, &xb).unwrap().x;
        let y = covariance_oi(&q.to_dense().try_inverse().unwrap(), &obs, &xb).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn crps_is_translation_invariant_and_nonnegative(members in prop::collection::vec(-5.0..5.0f64, 1..40), y in -5.0..5.0f64, shift in -3.0..3.0f64) {
        let c = crps(&members, y).unwrap();
        prop_assert!(c >= 0.0);
        let moved: Vec<f64> = members.iter().map(|m| m + shift).collect();
        prop_assert!((crps(&moved, y + shift).unwrap() - c).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn raster_round_trip(values in prop::collection::vec(-1e6..1e6f64, 3 * 4 * 2)) {
        let dir = tempfile::tempdir().unwrap();
        let field = SpaceTimeField::new(Grid2D::new(3, 4, 0.5, 2.0, 0.1, 2).unwrap(), values).unwrap();
        let path = dir.path().join("field");
        write_space_time(&field, &path).unwrap();
        prop_assert_eq!(read_space_time(&path).unwrap(), field);
    }
}

#[test]
fn interpolation_without_observations_returns_background() {
    let grid = Grid2D::unit(4, 4, 3).unwrap();
    let q = joint(&ParamFields::isotropic(grid, 0.7, 1.0, 1.0, 2).unwrap(), Scheme::Ufdm1).q;
    let xb: Vec<f64> = (0..grid.n_total()).map(|k| (k as f64 * 0.3).sin()).collect();
    assert_eq!(optimal_interpolate(&q, &ObsSet::empty(grid), &xb).unwrap().x, xb);
}

/// Empirical covariance of draws from `draw`.
fn empirical_covariance(n: usize, draws: usize, draw: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
    let mut cov = vec![0.0; n * n];
    for s in 0..draws {
        let x = draw(s);
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] += x[i] * x[j];
            }
        }
    }
    cov.iter().map(|c| c / draws as f64).collect()
}

#[test]
fn simulator_and_precision_sampler_agree() {
    let grid = Grid2D::unit(3, 3, 3).unwrap();
    let params = params_from(grid, &[0.8, 0.2, -0.1, 1.0, 0.5, 0.6, 0.8, 1.0], 2);
    let p0inv = build_p0_precision(&params, Scheme::Ufdm1, P0Mode::Recursion { n_stab: 200 }).unwrap();
    let q = build_joint_precision(&params, Scheme::Ufdm1, &p0inv).unwrap().q;
    let joint_factor = CholeskyFactor::factorize(&q, Ordering::default()).unwrap();
    let p0 = CholeskyFactor::factorize(&p0inv, Ordering::default()).unwrap();
    let sim = PriorSimulator::new(&params, Scheme::Ufdm1).unwrap();
    let n = grid.n_total();
    let draws = 40_000;
    let a = empirical_covariance(n, draws, |s| {
        let mut rng = member_rng(1, s as u64);
        let x0 = sample_from_precision_rng(&p0, &[0.0; 9], &mut rng).unwrap();
        sim.run(&x0, &mut rng).unwrap()
    });
    let b = empirical_covariance(n, draws, |s| sample_from_precision_rng(&joint_factor, &vec![0.0; n], &mut member_rng(2, s as u64)).unwrap());
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    assert!(diff / norm < 0.03, "relative covariance gap {}", diff / norm);
}

#[test]
fn joint_precision_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid2D::unit(3, 3, 2).unwrap();
    let jp = joint(&ParamFields::isotropic(grid, 1.0, 1.0, 1.0, 2).unwrap(), Scheme::Ufdm1);
    let path = dir.path().join("q.mtx");
    jp.write(&path).unwrap();
    let back = spdegp::sparse::read_matrix_market(&path).unwrap();
    assert_eq!(back.nnz(), jp.q.nnz());
    assert!(back.add_scaled(1.0, &jp.q, -1.0).unwrap().max_abs() <= 1e-15 * jp.q.max_abs());
    assert!(path.with_extension("json").exists());
}
