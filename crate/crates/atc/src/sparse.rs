//! Minimal CSC sparse matrices and a Cholesky wrapper.
//!
//! Assembly is two-phase for the large atomistic Hessians: the sparsity
//! pattern is laid out once column by column, then numeric values are
//! scattered into it by binary search.  Small irregular systems (the FE
//! Hessian) go through triplet assembly instead.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::Side;

use crate::error::{AtcError, Result};

/// Compressed sparse column matrix with a fixed pattern.
#[derive(Clone, Debug)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl CscMatrix {
    /// Build the pattern by calling `fill_col(j, rows)` for each column; the
    /// callback must push strictly increasing row indices.
    pub fn from_column_fn(
        nrows: usize,
        ncols: usize,
        mut fill_col: impl FnMut(usize, &mut Vec<usize>),
    ) -> Self {
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        let mut scratch = Vec::new();
        for j in 0..ncols {
            scratch.clear();
            fill_col(j, &mut scratch);
            debug_assert!(scratch.windows(2).all(|w| w[0] < w[1]));
            debug_assert!(scratch.iter().all(|&r| r < nrows));
            row_idx.extend_from_slice(&scratch);
            col_ptr.push(row_idx.len());
        }
        let val = vec![0.0; row_idx.len()];
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            val,
        }
    }

    /// Triplet assembly: duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(t.len());
        let mut val = Vec::with_capacity(t.len());
        for &(r, c, v) in &t {
            debug_assert!(r < nrows && c < ncols);
            row_idx.push(r);
            val.push(v);
            col_ptr[c + 1] += 1;
        }
        // prefix sums
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        // merge duplicates in-place per column
        let mut out_row = Vec::with_capacity(row_idx.len());
        let mut out_val = Vec::with_capacity(val.len());
        let mut out_ptr = vec![0usize; ncols + 1];
        for c in 0..ncols {
            let (lo, hi) = (col_ptr[c], col_ptr[c + 1]);
            let mut k = lo;
            while k < hi {
                let r = row_idx[k];
                let mut v = val[k];
                let mut k2 = k + 1;
                while k2 < hi && row_idx[k2] == r {
                    v += val[k2];
                    k2 += 1;
                }
                out_row.push(r);
                out_val.push(v);
                k = k2;
            }
            out_ptr[c + 1] = out_row.len();
        }
        Self {
            nrows,
            ncols,
            col_ptr: out_ptr,
            row_idx: out_row,
            val: out_val,
        }
    }

    pub fn zero_values(&mut self) {
        self.val.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Add `v` at (r, c); the slot must exist in the pattern.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let lo = self.col_ptr[c];
        let hi = self.col_ptr[c + 1];
        let k = self.row_idx[lo..hi]
            .binary_search(&r)
            .expect("entry outside assembled pattern");
        self.val[lo + k] += v;
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.val[k] * xc;
            }
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                acc += self.val[k] * x[self.row_idx[k]];
            }
            y[c] = acc;
        }
        y
    }

    fn as_faer(&self) -> SparseColMatRef<'_, usize, f64> {
        let sym = SymbolicSparseColMatRef::new_checked(
            self.nrows,
            self.ncols,
            &self.col_ptr,
            None,
            &self.row_idx,
        );
        SparseColMatRef::new(sym, &self.val)
    }

    /// Symbolic Cholesky analysis, reusable across refactorizations with the
    /// same pattern.
    pub fn symbolic_cholesky(&self) -> Result<SymbolicCholesky> {
        let sym = SymbolicLlt::try_new(self.as_faer().symbolic(), Side::Lower)
            .map_err(|_| AtcError::SingularSystem)?;
        Ok(SymbolicCholesky(sym))
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        self.symbolic_cholesky()?.factor(self)
    }
}

pub struct SymbolicCholesky(SymbolicLlt<usize>);

impl SymbolicCholesky {
    pub fn factor(&self, mat: &CscMatrix) -> Result<Cholesky> {
        let llt = Llt::try_new_with_symbolic(self.0.clone(), mat.as_faer(), Side::Lower)
            .map_err(|_| AtcError::SingularSystem)?;
        Ok(Cholesky(llt))
    }
}

pub struct Cholesky(Llt<usize, f64>);

impl Cholesky {
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let m = faer::MatMut::from_column_major_slice_mut(rhs, n, 1);
        self.0.solve_in_place(m);
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Conjugate gradients on an abstract SPD operator.  Returns the solution and
/// the iteration count; `apply` must be linear and symmetric positive
/// semidefinite with `b` in its range.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut rr = dot(&r, &r);
    let b_norm = rr.sqrt();
    if b_norm == 0.0 {
        return (x, 0);
    }
    for it in 0..max_iter {
        if rr.sqrt() <= rel_tol * b_norm {
            return (x, it);
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // numerically semidefinite direction; stop with current iterate
            return (x, it);
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    (x, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> CscMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CscMatrix::from_triplets(n, n, t)
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = CscMatrix::from_triplets(
            2,
            2,
            vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0), (0, 1, 0.5)],
        );
        assert_eq!(m.nnz(), 3);
        let y = m.matvec(&[1.0, 1.0]);
        assert_eq!(y, vec![3.5, 4.0]);
    }

    #[test]
    fn pattern_assembly_and_solve() {
        let n = 50;
        let mut m = CscMatrix::from_column_fn(n, n, |j, rows| {
            if j > 0 {
                rows.push(j - 1);
            }
            rows.push(j);
            if j + 1 < n {
                rows.push(j + 1);
            }
        });
        for j in 0..n {
            m.add(j, j, 2.0);
            if j + 1 < n {
                m.add(j, j + 1, -1.0);
                m.add(j + 1, j, -1.0);
            }
        }
        let reference = laplacian_1d(n);
        assert_eq!(m.row_idx, reference.row_idx);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = m.matvec(&x_true);
        let chol = m.cholesky().unwrap();
        let x = chol.solve(&b);
        let err: f64 = x
            .iter()
            .zip(&x_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-10, "err = {err:e}");
    }

    #[test]
    fn symbolic_reuse() {
        let m = laplacian_1d(20);
        let sym = m.symbolic_cholesky().unwrap();
        let mut m2 = m.clone();
        for v in &mut m2.val {
            *v *= 3.0;
        }
        let f1 = sym.factor(&m).unwrap();
        let f2 = sym.factor(&m2).unwrap();
        let b = vec![1.0; 20];
        let x1 = f1.solve(&b);
        let x2 = f2.solve(&b);
        for i in 0..20 {
            assert!((x1[i] - 3.0 * x2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let m = CscMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(m.cholesky().is_err());
    }

    #[test]
    fn transpose_matvec() {
        let m = CscMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (1, 0, 2.0), (0, 2, 3.0)]);
        let y = m.matvec_transpose(&[1.0, 1.0]);
        assert_eq!(y, vec![3.0, 0.0, 3.0]);
    }

    #[test]
    fn cg_solves_spd_system() {
        let n = 64;
        let m = laplacian_1d(n);
        let x_true: Vec<f64> = (0..n).map(|i| ((i * i) as f64 * 0.011).cos()).collect();
        let b = m.matvec(&x_true);
        let (x, iters) = conjugate_gradient(|v| m.matvec(v), &b, 1e-12, 10 * n);
        assert!(iters < 10 * n);
        let err: f64 = x
            .iter()
            .zip(&x_true)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "err = {err:e}");
    }
}
