//! Sparse matrices, sparse Cholesky factorization and its gradients.

mod backward;
mod cholesky;
mod csr;
mod market;
mod ordering;

pub use backward::{cholesky_backward, cholesky_backward_dense, solve_backward, solve_backward_with};
pub use cholesky::{solve_triangular, CholeskyFactor, Side, SymbolicCholesky, SYMMETRIZE_TOL, SYMMETRY_TOL};
pub use csr::CsrMatrix;
pub use market::{parse_matrix_market, read_matrix_market, write_matrix_market};
pub use ordering::{bandwidth, compute_ordering, reverse_cuthill_mckee, Ordering};

#[cfg(test)]
pub(crate) mod test_support {
    use super::CsrMatrix;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    /// `B Bᵀ + n I` with a random sparse `B`.
    pub fn random_spd(n: usize, density: f64, seed: u64) -> CsrMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| {
            if rng.gen::<f64>() < density {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let a = &b * b.transpose() + DMatrix::identity(n, n) * n as f64;
        CsrMatrix::from_dense(&a)
    }
}
