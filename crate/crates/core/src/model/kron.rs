//! Polynomials in x with coefficients on Kronecker powers and polynomial λ-dependence.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Largest admissible column count `d^j` of one coefficient block.
pub const MAX_BLOCK_COLS: usize = 1 << 20;

/// `ε(x, λ) = Σ_j Σ_l (λ - center)^l · C[j][l] · x^{⊗j}`, each `C[j][l]` of shape `d × d^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronPoly {
    dim: usize,
    center: f64,
    terms: Vec<Vec<DMatrix<f64>>>,
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut b = 1.0;
    for i in 0..k {
        b = b * (n - i) as f64 / (i + 1) as f64;
    }
    b
}

pub(crate) fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for k in 0..b.len() {
            out[i * b.len() + k] = a[i] * b[k];
        }
    }
    out
}

/// `x^{⊗0..=deg}` with `x^{⊗0} = [1]`.
pub(crate) fn kron_powers(x: &DVector<f64>, deg: usize) -> Vec<DVector<f64>> {
    let mut p = Vec::with_capacity(deg + 1);
    p.push(DVector::from_element(1, 1.0));
    for j in 1..=deg {
        let next = kron_vec(&p[j - 1], x);
        p.push(next);
    }
    p
}

fn checked_pow(d: usize, j: usize) -> Result<usize> {
    let mut n = 1usize;
    for _ in 0..j {
        n = n
            .checked_mul(d)
            .filter(|&v| v <= MAX_BLOCK_COLS)
            .ok_or_else(|| Error::Capacity(format!("d^{j} exceeds {MAX_BLOCK_COLS} columns")))?;
    }
    Ok(n)
}

impl KronPoly {
    pub fn zero(dim: usize) -> Self {
        Self { dim, center: 0.0, terms: Vec::new() }
    }

    /// Builds from `(x-degree, λ-degree, coefficient)` entries, coefficients in powers of λ.
    pub fn from_terms(dim: usize, entries: Vec<(usize, usize, DMatrix<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        let mut p = Self::zero(dim);
        for (j, l, c) in entries {
            let cols = checked_pow(dim, j)?;
            if c.nrows() != dim || c.ncols() != cols {
                return Err(Error::Domain(format!(
                    "degree-{j} coefficient must be {dim}x{cols}, got {}x{}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            p.add_coeff(j, l, &c);
        }
        p.trim();
        Ok(p)
    }

    fn add_coeff(&mut self, j: usize, l: usize, c: &DMatrix<f64>) {
        if self.terms.len() <= j {
            self.terms.resize(j + 1, Vec::new());
        }
        let cols = c.ncols();
        let row = &mut self.terms[j];
        while row.len() <= l {
            row.push(DMatrix::zeros(self.dim, cols));
        }
        row[l] += c;
    }

    fn trim(&mut self) {
        for row in &mut self.terms {
            while row.last().is_some_and(|m| m.iter().all(|&v| v == 0.0)) {
                row.pop();
            }
        }
        while self.terms.last().is_some_and(|r| r.is_empty()) {
            self.terms.pop();
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    /// Highest x-degree with a nonzero coefficient (0 for the zero polynomial).
    pub fn degree(&self) -> usize {
        self.terms.len().saturating_sub(1)
    }

    pub fn lambda_degree(&self) -> usize {
        self.terms.iter().map(|r| r.len()).max().unwrap_or(0).saturating_sub(1)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Raw λ-coefficients of the degree-`j` block about `center`.
    pub fn coeffs(&self, j: usize) -> &[DMatrix<f64>] {
        self.terms.get(j).map(|r| r.as_slice()).unwrap_or(&[])
    }

    /// Degree-`j` coefficient matrix at a given λ.
    pub fn coeff_at(&self, j: usize, lam: f64) -> DMatrix<f64> {
        let dl = lam - self.center;
        let cols = self.dim.pow(j as u32);
        let mut acc = DMatrix::zeros(self.dim, cols);
        for c in self.coeffs(j).iter().rev() {
            acc *= dl;
            acc += c;
        }
        acc
    }

    /// Freezes λ: list of `d × d^j` matrices.
    pub fn at_lambda(&self, lam: f64) -> Vec<DMatrix<f64>> {
        (0..self.terms.len()).map(|j| self.coeff_at(j, lam)).collect()
    }

    pub fn eval(&self, x: &DVector<f64>, lam: f64) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let pw = kron_powers(x, self.degree());
        let mut out = DVector::zeros(self.dim);
        for j in 0..self.terms.len() {
            if !self.terms[j].is_empty() {
                out += self.coeff_at(j, lam) * &pw[j];
            }
        }
        Ok(out)
    }

    /// Scalar fast path for `dim == 1`.
    pub fn eval_scalar(&self, x: f64, lam: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let dl = lam - self.center;
        let mut acc = 0.0;
        for row in self.terms.iter().rev() {
            let mut c = 0.0;
            for m in row.iter().rev() {
                c = c * dl + m[(0, 0)];
            }
            acc = acc * x + c;
        }
        acc
    }

    /// Derivative in x for `dim == 1`.
    pub fn deriv_scalar(&self, x: f64, lam: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let dl = lam - self.center;
        let mut acc = 0.0;
        for (j, row) in self.terms.iter().enumerate().skip(1).rev() {
            let mut c = 0.0;
            for m in row.iter().rev() {
                c = c * dl + m[(0, 0)];
            }
            acc = acc * x + j as f64 * c;
        }
        acc
    }

    /// Exact Jacobian `∂ε/∂x`.
    pub fn jacobian(&self, x: &DVector<f64>, lam: f64) -> Result<DMatrix<f64>> {
        let d = self.dim;
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let mut jac = DMatrix::zeros(d, d);
        // p = x^{⊗(j-1)}, dp = ∂x^{⊗j}/∂x built recursively.
        let mut p = DVector::from_element(1, 1.0);
        let mut dp = DMatrix::zeros(1, d);
        for j in 1..self.terms.len() {
            let mut next = DMatrix::zeros(p.len() * d, d);
            for r in 0..p.len() {
                for s in 0..d {
                    for c in 0..d {
                        next[(r * d + s, c)] = dp[(r, c)] * x[s];
                    }
                    next[(r * d + s, s)] += p[r];
                }
            }
            dp = next;
            p = kron_vec(&p, x);
            if !self.terms[j].is_empty() {
                jac += self.coeff_at(j, lam) * &dp;
            }
        }
        Ok(jac)
    }

    /// Same polynomial expanded about `center`.
    pub fn recentered(&self, center: f64) -> KronPoly {
        let delta = center - self.center;
        let terms = self
            .terms
            .iter()
            .map(|row| {
                let mut out: Vec<DMatrix<f64>> =
                    row.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
                for (l, c) in row.iter().enumerate() {
                    let mut dpow = 1.0;
                    for k in (0..=l).rev() {
                        // (λ-a)^l = Σ_k C(l,k) (λ-b)^k δ^{l-k}
                        out[k] += c * (binomial(l, k) * dpow);
                        dpow *= delta;
                    }
                }
                out
            })
            .collect();
        let mut p = KronPoly { dim: self.dim, center, terms };
        p.trim();
        p
    }

    pub fn add(&self, other: &KronPoly) -> Result<KronPoly> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let o = if other.center == self.center { other.clone() } else { other.recentered(self.center) };
        let mut out = self.clone();
        for (j, row) in o.terms.iter().enumerate() {
            for (l, c) in row.iter().enumerate() {
                out.add_coeff(j, l, c);
            }
        }
        out.trim();
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> KronPoly {
        let mut out = self.clone();
        for row in &mut out.terms {
            for m in row.iter_mut() {
                *m *= s;
            }
        }
        out.trim();
        out
    }

    /// Partial derivative in λ.
    pub fn d_lambda(&self) -> KronPoly {
        let terms = self
            .terms
            .iter()
            .map(|row| row.iter().enumerate().skip(1).map(|(l, c)| c * l as f64).collect())
            .collect();
        let mut p = KronPoly { dim: self.dim, center: self.center, terms };
        p.trim();
        p
    }

    /// Multiplies every coefficient by the λ-series `s` (about the same center).
    pub fn times_series(&self, s: &[f64]) -> KronPoly {
        let terms = self
            .terms
            .iter()
            .map(|row| {
                if row.is_empty() {
                    return Vec::new();
                }
                let (r, c) = row[0].shape();
                let mut out = vec![DMatrix::zeros(r, c); row.len() + s.len() - 1];
                for (l, m) in row.iter().enumerate() {
                    for (k, &sk) in s.iter().enumerate() {
                        if sk != 0.0 {
                            out[l + k] += m * sk;
                        }
                    }
                }
                out
            })
            .collect();
        let mut p = KronPoly { dim: self.dim, center: self.center, terms };
        p.trim();
        p
    }

    /// Polynomial `x ↦ s(λ)·x` about `center`.
    pub fn identity_times_series(dim: usize, center: f64, s: &[f64]) -> KronPoly {
        let mut p = KronPoly::zero(dim);
        p.center = center;
        let id = DMatrix::<f64>::identity(dim, dim);
        for (l, &sl) in s.iter().enumerate() {
            p.add_coeff(1, l, &(&id * sl));
        }
        p.trim();
        p
    }

    /// Directional derivative `(∂_x self)·v` as a polynomial; `v` must share the center.
    pub fn directional(&self, v: &KronPoly) -> Result<KronPoly> {
        let d = self.dim;
        if v.dim != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.dim });
        }
        let v = if v.center == self.center { v.clone() } else { v.recentered(self.center) };
        let mut out = KronPoly::zero(d);
        out.center = self.center;
        for j in 1..self.terms.len() {
            for jp in 0..v.terms.len() {
                if self.terms[j].is_empty() || v.terms[jp].is_empty() {
                    continue;
                }
                let out_deg = j - 1 + jp;
                let out_cols = checked_pow(d, out_deg)?;
                let dmu = checked_pow(d, jp)?;
                for a in 0..j {
                    let b = j - 1 - a;
                    let da = d.pow(a as u32);
                    let db = d.pow(b as u32);
                    for (l1, c) in self.terms[j].iter().enumerate() {
                        for (l2, o) in v.terms[jp].iter().enumerate() {
                            let mut res = DMatrix::zeros(d, out_cols);
                            for r in 0..d {
                                for al in 0..da {
                                    for be in 0..db {
                                        for m in 0..d {
                                            let cv = c[(r, (al * d + m) * db + be)];
                                            if cv == 0.0 {
                                                continue;
                                            }
                                            for mu in 0..dmu {
                                                res[(r, (al * dmu + mu) * db + be)] += cv * o[(m, mu)];
                                            }
                                        }
                                    }
                                }
                            }
                            out.add_coeff(out_deg, l1 + l2, &res);
                        }
                    }
                }
            }
        }
        out.trim();
        Ok(out)
    }

    /// Embeds independent scalar polynomials as a diagonal Kronecker polynomial.
    pub fn from_separable(coords: &[KronPoly]) -> Result<KronPoly> {
        let d = coords.len();
        if d == 0 {
            return Err(Error::Domain("empty separable model".into()));
        }
        let center = coords[0].center;
        let mut out = KronPoly::zero(d);
        out.center = center;
        for (i, cp) in coords.iter().enumerate() {
            let cp = if cp.center == center { cp.clone() } else { cp.recentered(center) };
            for (j, row) in cp.terms.iter().enumerate() {
                let cols = checked_pow(d, j)?;
                // flat index of (i, i, ..., i)
                let mut col = 0usize;
                for _ in 0..j {
                    col = col * d + i;
                }
                for (l, m) in row.iter().enumerate() {
                    let mut c = DMatrix::zeros(d, cols);
                    c[(i, col)] = m[(0, 0)];
                    out.add_coeff(j, l, &c);
                }
            }
        }
        out.trim();
        Ok(out)
    }
}
