//! Minimal compressed-row sparse matrix.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Coordinate-format accumulator; duplicates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.nrows && c < self.ncols);
        if v != 0.0 {
            self.entries.push((r, c, v));
        }
    }

    /// Adds every entry of `m` shifted by (`r0`, `c0`).
    pub fn push_csr(&mut self, m: &CsrMatrix, r0: usize, c0: usize, scale: f64) {
        for r in 0..m.nrows {
            for (c, v) in m.row(r) {
                self.push(r0 + r, c0 + c, scale * v);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_csr(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut m = CsrMatrix { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, values };
        m.drop_zeros();
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: vec![], values: vec![] }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Triplets::new(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                t.push(r, c, m[(r, c)]);
            }
        }
        t.into_csr()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    fn drop_zeros(&mut self) {
        let mut keep_ptr = vec![0usize; self.nrows + 1];
        let mut ci = Vec::with_capacity(self.col_idx.len());
        let mut vs = Vec::with_capacity(self.values.len());
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.values[k] != 0.0 {
                    ci.push(self.col_idx[k]);
                    vs.push(self.values[k]);
                }
            }
            keep_ptr[r + 1] = ci.len();
        }
        self.row_ptr = keep_ptr;
        self.col_idx = ci;
        self.values = vs;
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.ncols {
            return Err(Error::DimensionMismatch { expected: self.ncols, got: x.len() });
        }
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
        Ok(y)
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.nrows {
            return Err(Error::DimensionMismatch { expected: self.nrows, got: x.len() });
        }
        let mut y = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            let xr = x[r];
            if xr != 0.0 {
                for (c, v) in self.row(r) {
                    y[c] += v * xr;
                }
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut t = Triplets::new(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.push(c, r, v);
            }
        }
        t.into_csr()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                d[(r, c)] = v;
            }
        }
        d
    }

    /// `P M Pᵀ` for the permutation `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Result<CsrMatrix> {
        if perm.len() != self.nrows || self.nrows != self.ncols {
            return Err(Error::DimensionMismatch { expected: self.nrows, got: perm.len() });
        }
        let mut inv = vec![usize::MAX; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            if old >= perm.len() || inv[old] != usize::MAX {
                return Err(Error::Domain("not a permutation".into()));
            }
            inv[old] = new;
        }
        let mut t = Triplets::new(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.push(inv[r], inv[c], v);
            }
        }
        Ok(t.into_csr())
    }

    /// Maximum nonzeros in any column.
    pub fn max_col_nnz(&self) -> usize {
        let mut counts = vec![0usize; self.ncols];
        for &c in &self.col_idx {
            counts[c] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.nrows).map(|r| self.row_nnz(r)).max().unwrap_or(0)
    }

    fn diagonal_of(&self, r: usize) -> Result<f64> {
        let d = self.get(r, r);
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Structure(format!("zero or missing diagonal in row {r}")));
        }
        Ok(d)
    }

    /// Solves `L x = b` for lower-triangular `L`; entries above the diagonal are a structure violation.
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if self.nrows != self.ncols || b.len() != self.nrows {
            return Err(Error::DimensionMismatch { expected: self.nrows, got: b.len() });
        }
        let mut x = b.clone();
        for r in 0..self.nrows {
            let mut acc = x[r];
            let mut diag = None;
            for (c, v) in self.row(r) {
                if c < r {
                    acc -= v * x[c];
                } else if c == r {
                    diag = Some(v);
                } else {
                    return Err(Error::Structure(format!("entry ({r}, {c}) above the diagonal")));
                }
            }
            let d = diag.filter(|d| *d != 0.0).ok_or_else(|| {
                Error::Structure(format!("zero or missing diagonal in row {r}"))
            })?;
            x[r] = acc / d;
        }
        Ok(x)
    }

    /// Solves `Lᵀ x = b` for lower-triangular `L`.
    pub fn solve_lower_transpose(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if self.nrows != self.ncols || b.len() != self.nrows {
            return Err(Error::DimensionMismatch { expected: self.nrows, got: b.len() });
        }
        let mut x = b.clone();
        for r in (0..self.nrows).rev() {
            x[r] /= self.diagonal_of(r)?;
            let xr = x[r];
            for (c, v) in self.row(r) {
                if c > r {
                    return Err(Error::Structure(format!("entry ({r}, {c}) above the diagonal")));
                }
                if c < r {
                    x[c] -= v * xr;
                }
            }
        }
        Ok(x)
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.nrows).all(|r| self.row(r).all(|(c, _)| c <= r))
    }

    /// Checks sorted, unique, in-range column indices.
    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.nrows + 1 || self.col_idx.len() != self.values.len() {
            return Err(Error::Structure("inconsistent CSR arrays".into()));
        }
        for r in 0..self.nrows {
            let cols = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Structure(format!("row {r} columns not strictly increasing")));
            }
            if cols.last().is_some_and(|&c| c >= self.ncols) {
                return Err(Error::Structure(format!("row {r} column out of range")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_sum_and_cancel() {
        let mut t = Triplets::new(2, 3);
        t.push(0, 2, 1.0);
        t.push(0, 0, 2.0);
        t.push(0, 2, 3.0);
        t.push(1, 1, 1.0);
        t.push(1, 1, -1.0);
        let m = t.into_csr();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 2), 4.0);
        assert_eq!(m.row_nnz(1), 0);
        m.validate().unwrap();
    }

    #[test]
    fn matvec_matches_dense() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -2.0, 3.0, 0.0, 5.0]);
        let m = CsrMatrix::from_dense(&d);
        let x = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(m.mul_vec(&x).unwrap(), &d * &x);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.tr_mul_vec(&y).unwrap(), d.transpose() * &y);
        assert_eq!(m.transpose().to_dense(), d.transpose());
        assert_eq!(m.max_col_nnz(), 2);
        assert!(m.mul_vec(&y).is_err());
    }

    #[test]
    fn triangular_solves() {
        let l = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 1.0, 1.0, 0.0, -1.0, 0.5, 4.0]);
        let m = CsrMatrix::from_dense(&l);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = m.solve_lower(&b).unwrap();
        assert!((&l * &x - &b).norm() < 1e-15);
        let x = m.solve_lower_transpose(&b).unwrap();
        assert!((l.transpose() * &x - &b).norm() < 1e-15);
        let u = CsrMatrix::from_dense(&l.transpose());
        assert!(matches!(u.solve_lower(&b), Err(Error::Structure(_))));
    }
}
