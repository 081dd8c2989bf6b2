//! Reverse-mode gradients of the linear solve and of the Cholesky factorization.

use nalgebra::DMatrix;

use super::cholesky::CholeskyFactor;
use super::ordering::Ordering;
use super::CsrMatrix;
use crate::error::{Error, Result};

/// Lower-triangular factor by columns: diagonal first, rows increasing.
struct LowerCsc<'a> {
    n: usize,
    colptr: &'a [usize],
    rowidx: &'a [u32],
    values: &'a [f64],
}

impl LowerCsc<'_> {
    /// Reverse the up-looking factorization row by row. Returns the gradient
    /// with respect to the lower triangle of the factorized matrix, laid out
    /// on the pattern of `L`.
    fn backward(&self, lbar: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut lbar = lbar.to_vec();
        let mut abar = vec![0.0; self.values.len()];

        // Row structure: (column, position) for strictly lower entries.
        let mut rcount = vec![0usize; n + 1];
        for j in 0..n {
            for p in self.colptr[j] + 1..self.colptr[j + 1] {
                rcount[self.rowidx[p] as usize + 1] += 1;
            }
        }
        for k in 0..n {
            rcount[k + 1] += rcount[k];
        }
        let mut next = rcount.clone();
        let mut rows = vec![(0usize, 0usize); rcount[n]];
        for j in 0..n {
            for p in self.colptr[j] + 1..self.colptr[j + 1] {
                let k = self.rowidx[p] as usize;
                rows[next[k]] = (j, p);
                next[k] += 1;
            }
        }

        let mut w = vec![0.0; n];
        let mut in_set = vec![false; n];
        let mut set: Vec<usize> = Vec::new();
        for k in (0..n).rev() {
            let dk = self.colptr[k];
            let dbar = lbar[dk] / (2.0 * self.values[dk]);
            abar[dk] += dbar;
            let row = &rows[rcount[k]..rcount[k + 1]];
            if row.is_empty() {
                continue;
            }
            // Rows reached from the row pattern through column structure (equal
            // to the row pattern itself for a true Cholesky factor).
            set.clear();
            for &(j, _) in row {
                in_set[j] = true;
                set.push(j);
            }
            let mut head = 0;
            while head < set.len() {
                let j = set[head];
                head += 1;
                for p in self.colptr[j] + 1..self.colptr[j + 1] {
                    let i = self.rowidx[p] as usize;
                    if i >= k {
                        break;
                    }
                    if !in_set[i] {
                        in_set[i] = true;
                        set.push(i);
                    }
                }
            }
            set.sort_unstable();
            for &(j, p) in row {
                w[j] = lbar[p] - 2.0 * dbar * self.values[p];
            }
            for &j in set.iter().rev() {
                let mut s = w[j];
                for p in self.colptr[j] + 1..self.colptr[j + 1] {
                    let i = self.rowidx[p] as usize;
                    if i >= k {
                        break;
                    }
                    s -= self.values[p] * w[i];
                }
                w[j] = s / self.values[self.colptr[j]];
            }
            for &(j, p) in row {
                abar[p] += w[j];
                let lkj = self.values[p];
                for q in self.colptr[j]..self.colptr[j + 1] {
                    let i = self.rowidx[q] as usize;
                    if i >= k {
                        break;
                    }
                    lbar[q] -= w[i] * lkj;
                }
            }
            for &j in &set {
                w[j] = 0.0;
                in_set[j] = false;
            }
        }
        abar
    }
}

/// Gradient of a scalar loss with respect to a symmetric `A = L Lᵀ`, given the
/// factor `L` (lower-triangular CSR, positive diagonal) and `∂loss/∂L` on the
/// pattern of `L`. The result is symmetric on the pattern of `L + Lᵀ`.
pub fn cholesky_backward(l: &CsrMatrix, lbar: &CsrMatrix) -> Result<CsrMatrix> {
    let n = l.nrows();
    if l.ncols() != n || lbar.nrows() != n || lbar.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: lbar.nrows(),
        });
    }
    if !l.is_lower_triangular() {
        return Err(Error::NotTriangular);
    }
    if let Some(i) = l.diagonal().iter().position(|&d| !(d > 0.0)) {
        return Err(Error::NotPositiveDefinite { pivot: i });
    }
    if let Some((i, j, _)) = lbar.triplets().find(|&(i, j, v)| v != 0.0 && l.position(i, j).is_none()) {
        return Err(Error::InvalidParameter(format!(
            "gradient entry ({i}, {j}) outside the factor pattern"
        )));
    }
    // Rows of Lᵀ are the columns of L, diagonal first.
    let lt = l.transpose();
    let colptr = lt.indptr().to_vec();
    let rowidx: Vec<u32> = lt.indices().iter().map(|&i| i as u32).collect();
    let lbar_vals = lbar.transpose().values_on_pattern(&lt);
    let abar = LowerCsc {
        n,
        colptr: &colptr,
        rowidx: &rowidx,
        values: lt.data(),
    }
    .backward(&lbar_vals);
    let mut trip = Vec::with_capacity(2 * abar.len());
    for j in 0..n {
        for p in colptr[j]..colptr[j + 1] {
            let i = rowidx[p] as usize;
            if i == j {
                trip.push((i, i, abar[p]));
            } else {
                trip.push((i, j, 0.5 * abar[p]));
                trip.push((j, i, 0.5 * abar[p]));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &trip)
}

/// Dense reference: `½ L⁻ᵀ ltu(Lᵀ L̄) L⁻¹`, where `ltu` mirrors the lower
/// triangle onto the upper one.
pub fn cholesky_backward_dense(l: &DMatrix<f64>, lbar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    if (0..n).any(|i| (i + 1..n).any(|j| l[(i, j)] != 0.0)) {
        return Err(Error::NotTriangular);
    }
    let lbar = lbar.lower_triangle();
    let mut x = l.transpose() * lbar;
    for i in 0..n {
        for j in i + 1..n {
            x[(i, j)] = x[(j, i)];
        }
    }
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite { pivot: 0 })?;
    Ok(linv.transpose() * x * linv * 0.5)
}

impl CholeskyFactor {
    /// Gradient with respect to the lower triangle of `P A Pᵀ`, on the factor
    /// layout, given `∂loss/∂L` on the factor layout.
    pub fn backward(&self, lbar: &[f64]) -> Result<Vec<f64>> {
        if lbar.len() != self.nnz() {
            return Err(Error::DimensionMismatch {
                expected: self.nnz(),
                found: lbar.len(),
            });
        }
        Ok(LowerCsc {
            n: self.n(),
            colptr: self.colptr(),
            rowidx: self.rowidx(),
            values: self.values(),
        }
        .backward(lbar))
    }

    /// Map a lower-triangle gradient on the factor layout back to the pattern
    /// of the original matrix `a`, split symmetrically.
    pub fn gradient_on_pattern(&self, abar: &[f64], a: &CsrMatrix) -> Result<CsrMatrix> {
        let pinv = self.pinv();
        let (colptr, rowidx) = (self.colptr(), self.rowidx());
        let mut out = Vec::with_capacity(a.nnz());
        for (i, j, _) in a.triplets() {
            let (pi, pj) = (pinv[i], pinv[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            let col = &rowidx[colptr[c]..colptr[c + 1]];
            let off = col
                .binary_search(&(r as u32))
                .map_err(|_| Error::InvalidParameter(format!("entry ({i}, {j}) missing from factor")))?;
            let v = abar[colptr[c] + off];
            out.push(if i == j { v } else { 0.5 * v });
        }
        a.with_data(out)
    }

    /// `∂ logdet(A) / ∂A = A⁻¹`, evaluated at the stored entries of `a`.
    pub fn logdet_gradient(&self, a: &CsrMatrix) -> Result<CsrMatrix> {
        let mut lbar = vec![0.0; self.nnz()];
        let colptr = self.colptr();
        for j in 0..self.n() {
            lbar[colptr[j]] = 2.0 / self.values()[colptr[j]];
        }
        let abar = self.backward(&lbar)?;
        self.gradient_on_pattern(&abar, a)
    }
}

/// Gradients of a loss through `x = A⁻¹ b`: `grad_b = A⁻ᵀ ḡ` and
/// `grad_A = −grad_b xᵀ`, the latter sampled at the stored entries of `a`.
pub fn solve_backward_with(
    factor: &CholeskyFactor,
    a: &CsrMatrix,
    x: &[f64],
    gbar: &[f64],
) -> Result<(Vec<f64>, CsrMatrix)> {
    if x.len() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            found: x.len(),
        });
    }
    let grad_b = factor.solve(gbar)?;
    let vals = a.triplets().map(|(i, j, _)| -grad_b[i] * x[j]).collect();
    let grad_a = a.with_data(vals)?;
    Ok((grad_b, grad_a))
}

/// [`solve_backward_with`] factorizing `a` first.
pub fn solve_backward(a: &CsrMatrix, x: &[f64], gbar: &[f64]) -> Result<(Vec<f64>, CsrMatrix)> {
    let factor = CholeskyFactor::factorize(a, Ordering::default())?;
    solve_backward_with(&factor, a, x, gbar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::test_support::random_spd;

    fn logdet(a: &CsrMatrix) -> f64 {
        CholeskyFactor::factorize(a, Ordering::Natural).unwrap().logdet()
    }

    /// Central difference along the symmetric direction `E_ij + E_ji`
    /// (or `E_ii`), which equals `2 Ā_ij` off the diagonal and `Ā_ii` on it.
    fn fd_sym(a: &CsrMatrix, i: usize, j: usize, f: impl Fn(&CsrMatrix) -> f64) -> f64 {
        let h = 1e-6;
        let mut plus = a.clone();
        let mut minus = a.clone();
        for (r, c) in [(i, j), (j, i)] {
            let p = a.position(r, c).unwrap();
            plus.data_mut()[p] += h;
            minus.data_mut()[p] -= h;
            if i == j {
                break;
            }
        }
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn identity_zero_gradient() {
        let l = CsrMatrix::identity(4);
        let lbar = CsrMatrix::from_triplets(4, 4, &[]).unwrap();
        let abar = cholesky_backward(&l, &lbar).unwrap();
        assert!(abar.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_logdet() {
        let l = CsrMatrix::from_diagonal(&[2.0]);
        let lbar = CsrMatrix::from_diagonal(&[1.0]);
        let abar = cholesky_backward(&l, &lbar).unwrap();
        assert_eq!(abar.get(0, 0), 0.25);
    }

    #[test]
    fn rejects_upper_triangular() {
        let u = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(matches!(cholesky_backward(&u, &u), Err(Error::NotTriangular)));
        assert!(matches!(
            cholesky_backward_dense(&u.to_dense(), &u.to_dense()),
            Err(Error::NotTriangular)
        ));
    }

    #[test]
    fn logdet_gradient_is_inverse() {
        for seed in 0..4 {
            let a = random_spd(8, 0.35, seed);
            let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
            let g = f.logdet_gradient(&a).unwrap();
            let inv = a.to_dense().try_inverse().unwrap();
            for (i, j, v) in g.triplets() {
                assert!((v - inv[(i, j)]).abs() <= 1e-6 * inv[(i, j)].abs().max(1e-3));
                let fd = fd_sym(&a, i, j, logdet);
                let scale = if i == j { 1.0 } else { 2.0 };
                assert!((scale * v - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn sparse_and_dense_backward_agree() {
        for seed in 0..4 {
            let a = random_spd(8, 0.35, 40 + seed);
            let f = CholeskyFactor::factorize(&a, Ordering::Natural).unwrap();
            let l = f.l_matrix();
            // Arbitrary upstream gradient on the factor pattern.
            let lbar = l.with_data((0..l.nnz()).map(|p| ((p * 17 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
            let sparse = cholesky_backward(&l, &lbar).unwrap().to_dense();
            let dense = cholesky_backward_dense(&l.to_dense(), &lbar.to_dense()).unwrap();
            let lt_pattern = l.add(&l.transpose()).unwrap();
            for (i, j, _) in lt_pattern.triplets() {
                assert!((sparse[(i, j)] - dense[(i, j)]).abs() < 1e-10);
            }
            assert!((&sparse - sparse.transpose()).abs().max() < 1e-14);
        }
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        // loss(A) = Σ_p w_p L_p with L = chol(A) in natural order.
        let a = random_spd(8, 0.4, 77);
        let f0 = CholeskyFactor::factorize(&a, Ordering::Natural).unwrap();
        let l = f0.l_matrix();
        let weights: Vec<f64> = (0..l.nnz()).map(|p| ((p * 7 % 5) as f64) - 2.0).collect();
        let wmat = l.with_data(weights).unwrap();
        let loss = |m: &CsrMatrix| {
            let lm = CholeskyFactor::factorize(m, Ordering::Natural).unwrap().l_matrix();
            wmat.triplets().map(|(i, j, w)| w * lm.get(i, j)).sum::<f64>()
        };
        let abar = cholesky_backward(&l, &wmat).unwrap();
        for (i, j, _) in a.triplets().filter(|&(i, j, _)| i >= j) {
            let fd = fd_sym(&a, i, j, loss);
            let scale = if i == j { 1.0 } else { 2.0 };
            let g = scale * abar.get(i, j);
            assert!((g - fd).abs() <= 1e-5 * fd.abs().max(1e-2), "({i},{j}) {g} vs {fd}");
        }
    }

    #[test]
    fn solve_backward_identity_and_scalar() {
        let i3 = CsrMatrix::identity(3);
        let x = [1.0, 2.0, 3.0];
        let g = [0.5, -1.0, 2.0];
        let (gb, ga) = solve_backward(&i3, &x, &g).unwrap();
        assert_eq!(gb, g.to_vec());
        for (i, j, v) in ga.triplets() {
            assert_eq!(v, -g[i] * x[j]);
        }
        let a = CsrMatrix::from_diagonal(&[2.0]);
        let (gb, ga) = solve_backward(&a, &[3.0], &[1.0]).unwrap();
        assert!((gb[0] - 0.5).abs() < 1e-15);
        assert!((ga.get(0, 0) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn solve_backward_matches_finite_differences() {
        let a = random_spd(10, 0.3, 5);
        let b: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
        let x = f.solve(&b).unwrap();
        let (gb, ga) = solve_backward_with(&f, &a, &x, &[1.0; 10]).unwrap();
        // Entrywise perturbation of a single stored entry (non-symmetric).
        let h = 1e-6;
        for (i, j, _) in a.triplets() {
            let p = a.position(i, j).unwrap();
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[p] += h;
            am.data_mut()[p] -= h;
            let solve_ns = |m: &CsrMatrix| -> f64 {
                let d = m.to_dense().lu().solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
                d.iter().sum()
            };
            let fd = (solve_ns(&ap) - solve_ns(&am)) / (2.0 * h);
            assert!((ga.get(i, j) - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
        for k in 0..10 {
            let mut bp = b.clone();
            bp[k] += h;
            let mut bm = b.clone();
            bm[k] -= h;
            let fp: f64 = f.solve(&bp).unwrap().iter().sum();
            let fm: f64 = f.solve(&bm).unwrap().iter().sum();
            assert!((gb[k] - (fp - fm) / (2.0 * h)).abs() <= 1e-5);
        }
    }
}
