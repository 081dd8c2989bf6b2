use std::sync::Arc;

use super::ordering::{compute_ordering, Ordering};
use super::CsrMatrix;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Relative asymmetry accepted silently.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative asymmetry above which factorization is refused.
pub const SYMMETRIZE_TOL: f64 = 1e-9;

/// Ordering, elimination tree and the full pattern of `L` for one sparsity
/// pattern of `A`. Reusable across matrices sharing that pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    parent: Vec<usize>,
    colptr: Vec<usize>,
    rowidx: Vec<u32>,
    c_indptr: Vec<usize>,
    c_cols: Vec<usize>,
    c_src: Vec<usize>,
    a_indptr: Vec<usize>,
    a_indices: Vec<usize>,
}

/// Entries of row `k` of `L` (columns `< k`) in topological order, written
/// to `stack[top..]`; returns `top`.
fn ereach(
    k: usize,
    cols: &[usize],
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = k;
    for &c in cols {
        let mut i = c;
        if i >= k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

impl SymbolicCholesky {
    pub fn analyze(a: &CsrMatrix, ordering: Ordering) -> Result<Self> {
        let perm = compute_ordering(a, ordering);
        Self::with_permutation(a, perm)
    }

    /// Analyze with an explicit permutation (`perm[new] = old`).
    pub fn with_permutation(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: a.ncols(),
            });
        }
        if perm.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: perm.len(),
            });
        }
        let mut pinv = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || pinv[old] != NONE {
                return Err(Error::InvalidParameter("ordering is not a permutation".into()));
            }
            pinv[old] = new;
        }

        // Lower triangle of C = P A Pᵀ by rows, remembering where each value lives in A.
        let mut counts = vec![0usize; n + 1];
        for (i, j, _) in a.triplets() {
            let (pi, pj) = (pinv[i], pinv[j]);
            if pi >= pj {
                counts[pi + 1] += 1;
            }
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let mut next = counts.clone();
        let mut c_cols = vec![0usize; counts[n]];
        let mut c_src = vec![0usize; counts[n]];
        for i in 0..n {
            for p in a.indptr()[i]..a.indptr()[i + 1] {
                let (pi, pj) = (pinv[i], pinv[a.indices()[p]]);
                if pi >= pj {
                    c_cols[next[pi]] = pj;
                    c_src[next[pi]] = p;
                    next[pi] += 1;
                }
            }
        }
        for k in 0..n {
            let (lo, hi) = (counts[k], counts[k + 1]);
            let mut pairs: Vec<(usize, usize)> = (lo..hi).map(|p| (c_cols[p], c_src[p])).collect();
            pairs.sort_unstable();
            for (off, (c, s)) in pairs.into_iter().enumerate() {
                c_cols[lo + off] = c;
                c_src[lo + off] = s;
            }
        }
        let c_indptr = counts;

        // Elimination tree with path compression.
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &c in &c_cols[c_indptr[k]..c_indptr[k + 1]] {
                let mut i = c;
                while i != NONE && i < k {
                    let inext = ancestor[i];
                    ancestor[i] = k;
                    if inext == NONE {
                        parent[i] = k;
                    }
                    i = inext;
                }
            }
        }

        // Column counts, then row indices in the order the numeric pass fills them.
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        let mut colcount = vec![1usize; n];
        for k in 0..n {
            let top = ereach(k, &c_cols[c_indptr[k]..c_indptr[k + 1]], &parent, &mut stack, &mut mark);
            for &j in &stack[top..] {
                colcount[j] += 1;
            }
        }
        let mut colptr = vec![0usize; n + 1];
        for j in 0..n {
            colptr[j + 1] = colptr[j] + colcount[j];
        }
        if colptr[n] > u32::MAX as usize || n > u32::MAX as usize {
            return Err(Error::Unsupported("factor too large for 32-bit row indices".into()));
        }
        let mut rowidx = vec![0u32; colptr[n]];
        let mut fill: Vec<usize> = colptr[..n].iter().map(|&p| p + 1).collect();
        mark.iter_mut().for_each(|m| *m = NONE);
        for k in 0..n {
            rowidx[colptr[k]] = k as u32;
            let top = ereach(k, &c_cols[c_indptr[k]..c_indptr[k + 1]], &parent, &mut stack, &mut mark);
            for &j in &stack[top..] {
                rowidx[fill[j]] = k as u32;
                fill[j] += 1;
            }
        }

        Ok(SymbolicCholesky {
            n,
            perm,
            pinv,
            parent,
            colptr,
            rowidx,
            c_indptr,
            c_cols,
            c_src,
            a_indptr: a.indptr().to_vec(),
            a_indices: a.indices().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries of `L`, diagonal included.
    pub fn factor_nnz(&self) -> usize {
        self.colptr[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn matches(&self, a: &CsrMatrix) -> bool {
        a.nrows() == self.n && a.indptr() == self.a_indptr.as_slice() && a.indices() == self.a_indices.as_slice()
    }

    fn numeric(&self, values: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let mut l = vec![0.0; self.factor_nnz()];
        let mut x = vec![0.0; n];
        let mut fill: Vec<usize> = self.colptr[..n].iter().map(|&p| p + 1).collect();
        let mut stack = vec![0usize; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let (lo, hi) = (self.c_indptr[k], self.c_indptr[k + 1]);
            let top = ereach(k, &self.c_cols[lo..hi], &self.parent, &mut stack, &mut mark);
            for p in lo..hi {
                x[self.c_cols[p]] += values[self.c_src[p]];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &j in &stack[top..] {
                let lkj = x[j] / l[self.colptr[j]];
                x[j] = 0.0;
                for p in self.colptr[j] + 1..fill[j] {
                    x[self.rowidx[p] as usize] -= l[p] * lkj;
                }
                d -= lkj * lkj;
                l[fill[j]] = lkj;
                fill[j] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: self.perm[k] });
            }
            l[self.colptr[k]] = d.sqrt();
        }
        Ok(l)
    }
}

/// Sparse Cholesky factor `P A Pᵀ = L Lᵀ`, with `L` stored by columns
/// (diagonal first, rows increasing).
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<f64>,
    logdet: f64,
}

/// Check symmetry and return the matrix to factorize.
fn prepare(a: &CsrMatrix) -> Result<std::borrow::Cow<'_, CsrMatrix>> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let disc = a.symmetry_discrepancy();
    if disc <= SYMMETRY_TOL {
        Ok(std::borrow::Cow::Borrowed(a))
    } else if disc <= SYMMETRIZE_TOL {
        log::warn!("symmetrizing matrix with relative asymmetry {disc:.3e}");
        Ok(std::borrow::Cow::Owned(a.symmetrized()?))
    } else {
        Err(Error::Asymmetric { discrepancy: disc })
    }
}

impl CholeskyFactor {
    pub fn factorize(a: &CsrMatrix, ordering: Ordering) -> Result<Self> {
        let a = prepare(a)?;
        let symbolic = Arc::new(SymbolicCholesky::analyze(&a, ordering)?);
        Self::numeric(symbolic, &a)
    }

    /// Factorize reusing a symbolic analysis; re-analyzes if the pattern differs.
    pub fn factorize_with(symbolic: &Arc<SymbolicCholesky>, a: &CsrMatrix) -> Result<Self> {
        let a = prepare(a)?;
        if symbolic.matches(&a) {
            Self::numeric(Arc::clone(symbolic), &a)
        } else {
            let perm = symbolic.perm.clone();
            let fresh = if perm.len() == a.nrows() {
                SymbolicCholesky::with_permutation(&a, perm)?
            } else {
                SymbolicCholesky::analyze(&a, Ordering::default())?
            };
            Self::numeric(Arc::new(fresh), &a)
        }
    }

    /// New factor of a matrix with the same pattern as the one factorized here.
    pub fn refactor(&self, a: &CsrMatrix) -> Result<Self> {
        Self::factorize_with(&self.symbolic, a)
    }

    fn numeric(symbolic: Arc<SymbolicCholesky>, a: &CsrMatrix) -> Result<Self> {
        let values = symbolic.numeric(a.data())?;
        let logdet = 2.0
            * (0..symbolic.n)
                .map(|j| values[symbolic.colptr[j]].ln())
                .sum::<f64>();
        Ok(CholeskyFactor {
            symbolic,
            values,
            logdet,
        })
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Permutation with `perm[new] = old`.
    pub fn perm(&self) -> &[usize] {
        &self.symbolic.perm
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.values[self.symbolic.colptr[j]]).collect()
    }

    pub(crate) fn colptr(&self) -> &[usize] {
        &self.symbolic.colptr
    }

    pub(crate) fn rowidx(&self) -> &[u32] {
        &self.symbolic.rowidx
    }

    pub(crate) fn values(&self) -> &[f64] {
        &self.values
    }

    /// `L` (in permuted coordinates) as a CSR matrix.
    pub fn l_matrix(&self) -> CsrMatrix {
        let s = &self.symbolic;
        let mut trip = Vec::with_capacity(self.nnz());
        for j in 0..s.n {
            for p in s.colptr[j]..s.colptr[j + 1] {
                trip.push((s.rowidx[p] as usize, j, self.values[p]));
            }
        }
        CsrMatrix::from_triplets(s.n, s.n, &trip).expect("factor entries in range")
    }

    fn check_len(&self, b: &[f64]) -> Result<()> {
        if b.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: b.len(),
            });
        }
        Ok(())
    }

    /// In place `L z = y` (permuted coordinates).
    pub(crate) fn forward_in_place(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let p0 = s.colptr[j];
            y[j] /= self.values[p0];
            let yj = y[j];
            for p in p0 + 1..s.colptr[j + 1] {
                y[s.rowidx[p] as usize] -= self.values[p] * yj;
            }
        }
    }

    /// In place `Lᵀ w = z` (permuted coordinates).
    pub(crate) fn backward_in_place(&self, z: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.colptr[j];
            let mut acc = z[j];
            for p in p0 + 1..s.colptr[j + 1] {
                acc -= self.values[p] * z[s.rowidx[p] as usize];
            }
            z[j] = acc / self.values[p0];
        }
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let perm = &self.symbolic.perm;
        let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
        self.forward_in_place(&mut y);
        self.backward_in_place(&mut y);
        let mut x = vec![0.0; self.n()];
        for (new, &old) in perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }

    /// `Pᵀ L⁻ᵀ z`: maps white noise to a draw with covariance `A⁻¹`.
    pub fn apply_inv_lt(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        let mut w = z.to_vec();
        self.backward_in_place(&mut w);
        let mut x = vec![0.0; self.n()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            x[old] = w[new];
        }
        Ok(x)
    }

    /// `L⁻¹ P b`.
    pub fn apply_inv_l(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_len(b)?;
        let mut y: Vec<f64> = self.symbolic.perm.iter().map(|&old| b[old]).collect();
        self.forward_in_place(&mut y);
        Ok(y)
    }

    /// `bᵀ A⁻¹ b`.
    pub fn inv_quad(&self, b: &[f64]) -> Result<f64> {
        Ok(self.apply_inv_l(b)?.iter().map(|v| v * v).sum())
    }

    /// `‖P A Pᵀ − L Lᵀ‖_F / ‖A‖_F`, computed densely (small matrices only).
    pub fn residual(&self, a: &CsrMatrix) -> f64 {
        let l = self.l_matrix().to_dense();
        let ad = a.to_dense();
        let perm = &self.symbolic.perm;
        let n = self.n();
        let pa = nalgebra::DMatrix::from_fn(n, n, |i, j| ad[(perm[i], perm[j])]);
        (pa - &l * l.transpose()).norm() / ad.norm().max(f64::MIN_POSITIVE)
    }

    pub(crate) fn pinv(&self) -> &[usize] {
        &self.symbolic.pinv
    }
}

/// Which triangle of `L` a triangular solve uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `L x = b`.
    Lower,
    /// `Lᵀ x = b`.
    Upper,
}

/// Solve with a lower-triangular CSR matrix `L` or its transpose.
pub fn solve_triangular(l: &CsrMatrix, b: &[f64], side: Side) -> Result<Vec<f64>> {
    let n = l.nrows();
    if l.ncols() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    if !l.is_lower_triangular() {
        return Err(Error::NotTriangular);
    }
    let diag = l.diagonal();
    if let Some(i) = diag.iter().position(|&d| d == 0.0) {
        return Err(Error::NotPositiveDefinite { pivot: i });
    }
    let mut x = b.to_vec();
    match side {
        Side::Lower => {
            for i in 0..n {
                let (cols, vals) = l.row(i);
                let mut acc = x[i];
                for (&j, &v) in cols.iter().zip(vals) {
                    if j < i {
                        acc -= v * x[j];
                    }
                }
                x[i] = acc / diag[i];
            }
        }
        Side::Upper => {
            for i in (0..n).rev() {
                x[i] /= diag[i];
                let xi = x[i];
                let (cols, vals) = l.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    if j < i {
                        x[j] -= v * xi;
                    }
                }
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use crate::sparse::test_support::random_spd;

    #[test]
    fn identity_factor() {
        let f = CholeskyFactor::factorize(&CsrMatrix::identity(5), Ordering::default()).unwrap();
        assert_eq!(f.l_matrix(), CsrMatrix::identity(5));
        assert_eq!(f.logdet(), 0.0);
    }

    #[test]
    fn diagonal_factor() {
        let a = CsrMatrix::from_diagonal(&[4.0, 9.0]);
        let f = CholeskyFactor::factorize(&a, Ordering::Natural).unwrap();
        assert_eq!(f.diag(), vec![2.0, 3.0]);
        assert!((f.logdet() - 36f64.ln()).abs() < 1e-15);
        assert_eq!(f.solve(&[2.0, 9.0]).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn solve_small_analytic() {
        let a = CsrMatrix::from_diagonal(&[2.0, 4.0]);
        let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
        let x = f.solve(&[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn logdet_matches_dense_eigenvalues() {
        let a = random_spd(12, 0.4, 7);
        let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
        let eig = a.to_dense().symmetric_eigenvalues();
        let dense: f64 = eig.iter().map(|v| v.ln()).sum();
        assert!((f.logdet() - dense).abs() <= 1e-8 * dense.abs().max(1.0));
    }

    #[test]
    fn solve_matches_dense_lu() {
        let a = random_spd(20, 0.2, 11);
        let b: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
        let x = f.solve(&b).unwrap();
        let xd = a.to_dense().lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for i in 0..20 {
            assert!((x[i] - xd[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn indefinite_reports_original_pivot() {
        let a = CsrMatrix::from_diagonal(&[1.0, 2.0, -1.0, 4.0]);
        match CholeskyFactor::factorize(&a, Ordering::Natural) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn symmetry_thresholds() {
        let base = random_spd(6, 0.5, 3);
        let scale = base.max_abs();
        let mut tiny = base.clone();
        let (i, j) = base.triplets().find(|&(i, j, _)| i != j).map(|(i, j, _)| (i, j)).unwrap();
        let q = tiny.position(i, j).unwrap();
        tiny.data_mut()[q] += 1e-10 * scale;
        assert!(CholeskyFactor::factorize(&tiny, Ordering::default()).is_ok());
        let mut big = base.clone();
        big.data_mut()[q] += 1e-6 * scale;
        assert!(matches!(
            CholeskyFactor::factorize(&big, Ordering::default()),
            Err(Error::Asymmetric { .. })
        ));
    }

    #[test]
    fn refactor_reuses_symbolic() {
        let a = random_spd(15, 0.3, 5);
        let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
        let a2 = a.add(&CsrMatrix::identity(15)).unwrap();
        let g = f.refactor(&a2).unwrap();
        assert!(Arc::ptr_eq(f.symbolic(), g.symbolic()));
        assert!(g.residual(&a2) < 1e-12);
    }

    #[test]
    fn triangular_solves() {
        let l = CsrMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (1, 0, 1.0), (1, 1, 1.0), (2, 1, -1.0), (2, 2, 4.0)]).unwrap();
        let b = [2.0, 3.0, 6.0];
        let x = solve_triangular(&l, &b, Side::Lower).unwrap();
        let ld = l.to_dense();
        let r = &ld * nalgebra::DVector::from_vec(x.clone());
        assert!((0..3).all(|i| (r[i] - b[i]).abs() < 1e-14));
        let y = solve_triangular(&l, &b, Side::Upper).unwrap();
        let r = ld.transpose() * nalgebra::DVector::from_vec(y);
        assert!((0..3).all(|i| (r[i] - b[i]).abs() < 1e-14));
        assert!(matches!(
            solve_triangular(&l.transpose(), &b, Side::Lower),
            Err(Error::NotTriangular)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn residual_and_logdet(n in 2usize..=64, seed in 0u64..10_000, natural in any::<bool>()) {
            let a = random_spd(n, 0.15, seed);
            let ord = if natural { Ordering::Natural } else { Ordering::ReverseCuthillMcKee };
            let f = CholeskyFactor::factorize(&a, ord).unwrap();
            prop_assert!(f.residual(&a) <= 1e-10);
            let dense = a.to_dense().cholesky().unwrap();
            let ld: f64 = 2.0 * dense.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            prop_assert!((f.logdet() - ld).abs() <= 1e-8 * ld.abs().max(1.0));
            let x: Vec<f64> = (0..n).map(|i| ((i * 31 + 7) % 13) as f64 - 6.0).collect();
            let b = a.spmv(&x).unwrap();
            let back = f.solve(&b).unwrap();
            let err = back.iter().zip(&x).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-9 * nx.max(1.0));
        }

        #[test]
        fn ill_conditioned_residual(n in 2usize..=40, seed in 0u64..1000) {
            // Graded diagonal gives condition numbers up to about 1e6.
            let base = random_spd(n, 0.2, seed).to_dense();
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| 10f64.powf(-3.0 * i as f64 / n as f64)));
            let a = CsrMatrix::from_dense(&(&d * base * &d));
            let a = a.symmetrized().unwrap();
            let f = CholeskyFactor::factorize(&a, Ordering::default()).unwrap();
            prop_assert!(f.residual(&a) <= 1e-10);
        }
    }
}
