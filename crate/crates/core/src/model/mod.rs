//! Polynomial noise-prediction models ε(x, λ), their λ-total-derivatives and Jacobians.

mod kron;
pub mod presets;

pub use kron::{KronPoly, MAX_BLOCK_COLS};
pub(crate) use kron::kron_vec;
use kron::kron_powers;

use nalgebra::{DMatrix, DVector};

use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Largest state dimension accepted in Kronecker mode.
pub const KRON_MAX_DIM: usize = 4;

/// Degree of the λ-series used for σ_λ inside total derivatives.
pub const SIGMA_SERIES_DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    Scalar,
    Kron,
    Separable,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Kron(KronPoly),
    Separable(Vec<KronPoly>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyNoiseModel {
    repr: Repr,
}

/// A point on a sampling trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub lam: f64,
    pub x: DVector<f64>,
}

/// Jacobian, kept diagonal for separable models so large dimensions stay cheap.
#[derive(Debug, Clone, PartialEq)]
pub enum Jacobian {
    Dense(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Jacobian {
    pub fn dim(&self) -> usize {
        match self {
            Jacobian::Dense(m) => m.nrows(),
            Jacobian::Diagonal(v) => v.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Jacobian::Dense(m) => m.clone(),
            Jacobian::Diagonal(v) => DMatrix::from_diagonal(v),
        }
    }

    fn affine(self, shift: f64, scale: f64) -> Jacobian {
        match self {
            Jacobian::Dense(m) => {
                let n = m.nrows();
                Jacobian::Dense(m * scale + DMatrix::identity(n, n) * shift)
            }
            Jacobian::Diagonal(v) => Jacobian::Diagonal(v.map(|e| shift + scale * e)),
        }
    }
}

fn scalar_poly(entries: &[(usize, usize, f64)]) -> Result<KronPoly> {
    KronPoly::from_terms(
        1,
        entries.iter().map(|&(j, l, c)| (j, l, DMatrix::from_element(1, 1, c))).collect(),
    )
}

impl PolyNoiseModel {
    pub fn zero(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        if dim <= KRON_MAX_DIM {
            Ok(Self { repr: Repr::Kron(KronPoly::zero(dim)) })
        } else {
            Ok(Self { repr: Repr::Separable(vec![KronPoly::zero(1); dim]) })
        }
    }

    /// Scalar model from `(x-degree, λ-degree, coefficient)` triples.
    pub fn scalar(entries: &[(usize, usize, f64)]) -> Result<Self> {
        Ok(Self { repr: Repr::Kron(scalar_poly(entries)?) })
    }

    /// Kronecker-mode model; coefficient of degree j has shape `d × d^j`.
    pub fn kron(dim: usize, entries: Vec<(usize, usize, DMatrix<f64>)>) -> Result<Self> {
        if dim > KRON_MAX_DIM {
            return Err(Error::Capacity(format!(
                "kron mode supports d <= {KRON_MAX_DIM}, got {dim}"
            )));
        }
        Ok(Self { repr: Repr::Kron(KronPoly::from_terms(dim, entries)?) })
    }

    /// Independent scalar polynomial per coordinate.
    pub fn separable(coords: &[Vec<(usize, usize, f64)>]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Domain("separable model needs >= 1 coordinate".into()));
        }
        let polys = coords.iter().map(|c| scalar_poly(c)).collect::<Result<Vec<_>>>()?;
        Ok(Self { repr: Repr::Separable(polys) })
    }

    pub fn from_kron_poly(p: KronPoly) -> Result<Self> {
        if p.dim() > KRON_MAX_DIM {
            return Err(Error::Capacity(format!("kron mode supports d <= {KRON_MAX_DIM}")));
        }
        Ok(Self { repr: Repr::Kron(p) })
    }

    pub fn mode(&self) -> ModelMode {
        match &self.repr {
            Repr::Kron(p) if p.dim() == 1 => ModelMode::Scalar,
            Repr::Kron(_) => ModelMode::Kron,
            Repr::Separable(_) => ModelMode::Separable,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Kron(p) => p.dim(),
            Repr::Separable(v) => v.len(),
        }
    }

    /// Degree J in x.
    pub fn degree(&self) -> usize {
        match &self.repr {
            Repr::Kron(p) => p.degree(),
            Repr::Separable(v) => v.iter().map(|p| p.degree()).max().unwrap_or(0),
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.repr {
            Repr::Kron(p) => p.is_zero(),
            Repr::Separable(v) => v.iter().all(|p| p.is_zero()),
        }
    }

    /// Kronecker form, converting separable models of small dimension.
    pub fn to_kron(&self) -> Result<KronPoly> {
        match &self.repr {
            Repr::Kron(p) => Ok(p.clone()),
            Repr::Separable(v) => {
                if v.len() > KRON_MAX_DIM {
                    return Err(Error::Capacity(format!(
                        "separable model with d = {} cannot be lifted (kron mode needs d <= {KRON_MAX_DIM})",
                        v.len()
                    )));
                }
                KronPoly::from_separable(v)
            }
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn eval_eps(&self, x: &DVector<f64>, lam: f64) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        match &self.repr {
            Repr::Kron(p) if p.dim() == 1 => Ok(DVector::from_element(1, p.eval_scalar(x[0], lam))),
            Repr::Kron(p) => p.eval(x, lam),
            Repr::Separable(v) => {
                Ok(DVector::from_iterator(x.len(), v.iter().zip(x.iter()).map(|(p, &xi)| p.eval_scalar(xi, lam))))
            }
        }
    }

    pub fn jacobian_eps(&self, x: &DVector<f64>, lam: f64) -> Result<Jacobian> {
        self.check_dim(x)?;
        match &self.repr {
            Repr::Kron(p) if p.dim() == 1 => {
                Ok(Jacobian::Dense(DMatrix::from_element(1, 1, p.deriv_scalar(x[0], lam))))
            }
            Repr::Kron(p) => Ok(Jacobian::Dense(p.jacobian(x, lam)?)),
            Repr::Separable(v) => Ok(Jacobian::Diagonal(DVector::from_iterator(
                x.len(),
                v.iter().zip(x.iter()).map(|(p, &xi)| p.deriv_scalar(xi, lam)),
            ))),
        }
    }

    /// Sum of two models of the same mode and dimension.
    pub fn add(&self, other: &PolyNoiseModel) -> Result<PolyNoiseModel> {
        let repr = match (&self.repr, &other.repr) {
            (Repr::Kron(a), Repr::Kron(b)) => Repr::Kron(a.add(b)?),
            (Repr::Separable(a), Repr::Separable(b)) => {
                if a.len() != b.len() {
                    return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
                }
                Repr::Separable(a.iter().zip(b).map(|(p, q)| p.add(q)).collect::<Result<_>>()?)
            }
            (Repr::Kron(_), Repr::Separable(_)) => Repr::Kron(self.to_kron()?.add(&other.to_kron()?)?),
            (Repr::Separable(_), Repr::Kron(_)) => Repr::Kron(self.to_kron()?.add(&other.to_kron()?)?),
        };
        Ok(Self { repr })
    }

    /// Reorders the coordinates of a separable model (`perm[new] = old`).
    pub fn permuted(&self, perm: &[usize]) -> Result<PolyNoiseModel> {
        match &self.repr {
            Repr::Separable(v) if perm.len() == v.len() => {
                Ok(Self { repr: Repr::Separable(perm.iter().map(|&o| v[o].clone()).collect()) })
            }
            Repr::Separable(v) => Err(Error::DimensionMismatch { expected: v.len(), got: perm.len() }),
            _ => Err(Error::Domain("permutation is only defined for separable models".into())),
        }
    }

    fn map_polys(&self, f: impl Fn(&KronPoly) -> Result<KronPoly>) -> Result<PolyNoiseModel> {
        let repr = match &self.repr {
            Repr::Kron(p) => Repr::Kron(f(p)?),
            Repr::Separable(v) => Repr::Separable(v.iter().map(f).collect::<Result<_>>()?),
        };
        Ok(Self { repr })
    }

    fn zip_polys(
        &self,
        other: &PolyNoiseModel,
        f: impl Fn(&KronPoly, &KronPoly) -> Result<KronPoly>,
    ) -> Result<PolyNoiseModel> {
        let repr = match (&self.repr, &other.repr) {
            (Repr::Kron(a), Repr::Kron(b)) => Repr::Kron(f(a, b)?),
            (Repr::Separable(a), Repr::Separable(b)) => {
                Repr::Separable(a.iter().zip(b).map(|(p, q)| f(p, q)).collect::<Result<_>>()?)
            }
            _ => return Err(Error::Domain("mixed model modes".into())),
        };
        Ok(Self { repr })
    }
}

/// Polynomial map with frozen coefficients: `x ↦ Σ_j terms[j]·x^{⊗j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMap {
    pub dim: usize,
    pub terms: Vec<DMatrix<f64>>,
}

impl StepMap {
    pub fn zero(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    fn ensure(&mut self, deg: usize) {
        while self.terms.len() <= deg {
            let j = self.terms.len() as u32;
            self.terms.push(DMatrix::zeros(self.dim, self.dim.pow(j)));
        }
    }

    /// Adds `scale·x`.
    pub fn add_identity(&mut self, scale: f64) {
        self.ensure(1);
        for i in 0..self.dim {
            self.terms[1][(i, i)] += scale;
        }
    }

    /// Adds `scale·p(x, lam)`.
    pub fn add_poly(&mut self, p: &KronPoly, lam: f64, scale: f64) -> Result<()> {
        if p.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: p.dim() });
        }
        for (j, c) in p.at_lambda(lam).into_iter().enumerate() {
            self.ensure(j);
            self.terms[j] += c * scale;
        }
        Ok(())
    }

    /// Highest degree with a nonzero coefficient.
    pub fn degree(&self) -> usize {
        self.terms.iter().rposition(|m| m.iter().any(|&v| v != 0.0)).unwrap_or(0)
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let pw = kron_powers(x, self.terms.len().saturating_sub(1));
        let mut out = DVector::zeros(self.dim);
        for (j, c) in self.terms.iter().enumerate() {
            out += c * &pw[j];
        }
        Ok(out)
    }
}

/// Taylor coefficients of `σ_λ` and `σ_λ²` about `lam0` (VP), up to `deg`.
pub fn sigma_series(lam0: f64, deg: usize) -> (Vec<f64>, Vec<f64>) {
    let mut fact = 1.0;
    // σ² = 1/(1+e^{2λ}) = w/(1+w) with w = e^{-2λ}; pick the form that cannot overflow.
    let q = if lam0 <= 0.0 {
        let e0 = (2.0 * lam0).exp();
        let mut u = vec![0.0; deg + 1];
        for (k, uk) in u.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            *uk = e0 * 2f64.powi(k as i32) / fact;
        }
        u[0] += 1.0;
        series_recip(&u)
    } else {
        let e0 = (-2.0 * lam0).exp();
        let mut w = vec![0.0; deg + 1];
        for (k, wk) in w.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            *wk = e0 * (-2f64).powi(k as i32) / fact;
        }
        let mut one_w = w.clone();
        one_w[0] += 1.0;
        series_mul(&w, &series_recip(&one_w), deg)
    };
    (series_sqrt(&q), q)
}

fn series_mul(a: &[f64], b: &[f64], deg: usize) -> Vec<f64> {
    let mut out = vec![0.0; deg + 1];
    for (i, &ai) in a.iter().enumerate().take(deg + 1) {
        for (k, &bk) in b.iter().enumerate().take(deg + 1 - i) {
            out[i + k] += ai * bk;
        }
    }
    out
}

fn series_recip(a: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; a.len()];
    r[0] = 1.0 / a[0];
    for k in 1..a.len() {
        let s: f64 = (1..=k).map(|i| a[i] * r[k - i]).sum();
        r[k] = -s / a[0];
    }
    r
}

fn series_sqrt(a: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; a.len()];
    s[0] = a[0].sqrt();
    for k in 1..a.len() {
        let c: f64 = (1..k).map(|i| s[i] * s[k - i]).sum();
        s[k] = (a[k] - c) / (2.0 * s[0]);
    }
    s
}

/// `dx/dλ = σ_λ²x - σ_λ ε(x, λ)`.
pub fn dx_dlambda(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x: &DVector<f64>,
    lam: f64,
) -> Result<DVector<f64>> {
    let sg = s.sigma_of_lambda(lam);
    let eps = m.eval_eps(x, lam)?;
    Ok(x * (sg * sg) - eps * sg)
}

/// Velocity field `v = σ²x - σε` as a polynomial about `lam0`.
fn velocity_poly(p: &KronPoly, lam0: f64) -> Result<KronPoly> {
    let (s1, s2) = sigma_series(lam0, SIGMA_SERIES_DEGREE);
    let id = KronPoly::identity_times_series(p.dim(), lam0, &s2);
    id.add(&p.recentered(lam0).times_series(&s1).scaled(-1.0))
}

/// `ε^{(0..k)}` along the trajectory, expanded about `lam0`.
pub fn derivative_tower(
    _s: &NoiseSchedule,
    m: &PolyNoiseModel,
    k: usize,
    lam0: f64,
) -> Result<Vec<PolyNoiseModel>> {
    let base = m.map_polys(|p| Ok(p.recentered(lam0)))?;
    let vel = base.map_polys(|p| velocity_poly(p, lam0))?;
    let mut out = vec![base];
    for _ in 1..k {
        let prev = out.last().unwrap();
        let next = prev.zip_polys(&vel, |e, v| e.d_lambda().add(&e.directional(v)?))?;
        out.push(next);
    }
    Ok(out)
}

/// n-th total λ-derivative of ε along the trajectory, expanded about `lam0`.
pub fn total_derivative_poly(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    n: usize,
    lam0: f64,
) -> Result<PolyNoiseModel> {
    Ok(derivative_tower(s, m, n + 1, lam0)?.pop().unwrap())
}

/// Drift Jacobian `f(t)I + g²(t)/(2σ_t) ∂ε/∂x`.
pub fn drift_jacobian(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x: &DVector<f64>,
    t: f64,
) -> Result<Jacobian> {
    if !(t >= s.t_floor * (1.0 - 1e-12)) {
        return Err(Error::SingularSigma { t });
    }
    let je = m.jacobian_eps(x, s.lambda(t))?;
    Ok(je.affine(s.drift(t), s.diffusion2(t) / (2.0 * s.sigma(t))))
}

/// Full drift `f(t)x + g²(t)/(2σ_t) ε(x, λ(t))` of the probability-flow ODE in t.
pub fn drift(s: &NoiseSchedule, m: &PolyNoiseModel, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let eps = m.eval_eps(x, s.lambda(t))?;
    Ok(x * s.drift(t) + eps * (s.diffusion2(t) / (2.0 * s.sigma(t))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp(0.1, 20.0, 1.0).unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn eval_examples() {
        assert_eq!(PolyNoiseModel::zero(3).unwrap().eval_eps(&DVector::from_element(3, 2.0), 0.1).unwrap().norm(), 0.0);
        let m = PolyNoiseModel::scalar(&[(1, 0, 0.5)]).unwrap();
        assert_eq!(m.eval_eps(&v1(2.0), 0.0).unwrap()[0], 1.0);
        let m = PolyNoiseModel::scalar(&[(0, 1, 1.0), (2, 0, 1.0)]).unwrap();
        assert!((m.eval_eps(&v1(2.0), 0.3).unwrap()[0] - 4.3).abs() < 1e-15);
        assert!(m.eval_eps(&DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn sigma_series_matches_derivatives() {
        let s = vp();
        for &l0 in &[-5.0, -0.3, 0.0, 0.8, 4.5] {
            let (s1, s2) = sigma_series(l0, 4);
            for &dl in &[1e-3f64, -2e-3] {
                let series: f64 = s1.iter().enumerate().map(|(k, c)| c * dl.powi(k as i32)).sum();
                let sq: f64 = s2.iter().enumerate().map(|(k, c)| c * dl.powi(k as i32)).sum();
                let want = s.sigma_of_lambda(l0 + dl);
                assert!((series - want).abs() < 1e-14, "l0={l0}");
                assert!((sq - want * want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_order_derivative_is_identity() {
        let s = vp();
        let m = PolyNoiseModel::scalar(&[(1, 1, 0.3), (2, 0, 0.05)]).unwrap();
        let d0 = total_derivative_poly(&s, &m, 0, 1.3).unwrap();
        for &x in &[-0.5, 0.7] {
            for &l in &[0.0, 1.3, 2.0] {
                let a = m.eval_eps(&v1(x), l).unwrap()[0];
                let b = d0.eval_eps(&v1(x), l).unwrap()[0];
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_model_has_zero_derivative() {
        let s = vp();
        let m = PolyNoiseModel::scalar(&[(0, 0, 0.7)]).unwrap();
        assert!(total_derivative_poly(&s, &m, 1, 0.5).unwrap().is_zero());
    }

    #[test]
    fn first_derivative_closed_form() {
        // ε = x²: Dε = 2x(σ²x - σx²)
        let s = vp();
        let m = PolyNoiseModel::scalar(&[(2, 0, 1.0)]).unwrap();
        let lam = 0.4;
        let d1 = total_derivative_poly(&s, &m, 1, lam).unwrap();
        let sg = s.sigma_of_lambda(lam);
        let x = 0.8;
        let want = 2.0 * x * (sg * sg * x - sg * x * x);
        assert!((d1.eval_eps(&v1(x), lam).unwrap()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn second_derivative_by_finite_difference_of_first() {
        // D²ε(x, λ) = d/dλ [Dε(x(λ), λ)] along the flow
        let s = vp();
        let m = PolyNoiseModel::scalar(&[(1, 1, 0.2), (2, 0, 0.05), (3, 0, 0.01)]).unwrap();
        let (lam, x) = (0.6, 0.9);
        let d2 = total_derivative_poly(&s, &m, 2, lam).unwrap().eval_eps(&v1(x), lam).unwrap()[0];
        let h = 1e-4;
        let step = |dl: f64| {
            // RK4 on dx/dλ for a tiny step
            let f = |l: f64, y: f64| dx_dlambda(&s, &m, &v1(y), l).unwrap()[0];
            let n = 20;
            let hh = dl / n as f64;
            let (mut l, mut y) = (lam, x);
            for _ in 0..n {
                let k1 = f(l, y);
                let k2 = f(l + hh / 2.0, y + hh / 2.0 * k1);
                let k3 = f(l + hh / 2.0, y + hh / 2.0 * k2);
                let k4 = f(l + hh, y + hh * k3);
                y += hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                l += hh;
            }
            let center = lam + dl;
            total_derivative_poly(&s, &m, 1, center).unwrap().eval_eps(&v1(y), center).unwrap()[0]
        };
        let fd = (step(h) - step(-h)) / (2.0 * h);
        assert!((fd - d2).abs() < 1e-6 * d2.abs().max(1e-3), "{fd} vs {d2}");
    }

    #[test]
    fn drift_jacobian_examples() {
        let s = vp();
        let t = 0.4;
        let z = PolyNoiseModel::zero(2).unwrap();
        let j = drift_jacobian(&s, &z, &DVector::zeros(2), t).unwrap().to_dense();
        assert!((j - DMatrix::identity(2, 2) * s.drift(t)).norm() < 1e-15);
        let c = 0.3;
        let lin = PolyNoiseModel::scalar(&[(1, 0, c)]).unwrap();
        let j = drift_jacobian(&s, &lin, &v1(5.0), t).unwrap().to_dense()[(0, 0)];
        let want = s.drift(t) + s.diffusion2(t) * c / (2.0 * s.sigma(t));
        assert!((j - want).abs() < 1e-13);
        assert!(matches!(drift_jacobian(&s, &lin, &v1(1.0), 1e-4), Err(Error::SingularSigma { .. })));
    }

    #[test]
    fn jacobian_examples() {
        let m = PolyNoiseModel::scalar(&[(2, 0, 1.0)]).unwrap();
        assert_eq!(m.jacobian_eps(&v1(3.0), 0.0).unwrap().to_dense()[(0, 0)], 6.0);
        let lin = PolyNoiseModel::kron(2, vec![(1, 0, DMatrix::identity(2, 2) * 0.4)]).unwrap();
        let j = lin.jacobian_eps(&DVector::from_vec(vec![1.0, 7.0]), 0.0).unwrap().to_dense();
        assert_eq!(j, DMatrix::identity(2, 2) * 0.4);
    }

    #[test]
    fn kron_mode_rejects_large_dim() {
        assert!(matches!(PolyNoiseModel::kron(5, vec![]), Err(Error::Capacity(_))));
    }
}
