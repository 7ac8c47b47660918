//! Noise schedules, log-SNR grids and exponentially weighted Taylor integrals.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Variance preserving, linear β(t).
    Vp,
}

/// Fraction of `T` used as the default time floor.
pub const DEFAULT_FLOOR_FRACTION: f64 = 1e-3;

/// Absolute tolerance on λ when inverting λ(t).
const INVERSION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    /// Smallest admissible time; samples are read here.
    pub t_floor: f64,
}

impl NoiseSchedule {
    /// VP schedule with `log α = -t²(β_max-β_min)/(4T) - tβ_min/2`.
    pub fn vp(beta_min: f64, beta_max: f64, t_max: f64) -> Result<Self> {
        if !(beta_min > 0.0) || !(beta_max >= beta_min) || !beta_max.is_finite() {
            return Err(Error::Domain(format!(
                "need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(Error::Domain(format!("need T > 0, got {t_max}")));
        }
        Ok(Self {
            kind: ScheduleKind::Vp,
            beta_min,
            beta_max,
            t_max,
            t_floor: DEFAULT_FLOOR_FRACTION * t_max,
        })
    }

    pub fn with_t_floor(mut self, t_floor: f64) -> Result<Self> {
        if !(t_floor > 0.0 && t_floor < self.t_max) {
            return Err(Error::Domain(format!("t_floor {t_floor} outside (0, T)")));
        }
        self.t_floor = t_floor;
        Ok(self)
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta_max - self.beta_min) / self.t_max - 0.5 * t * self.beta_min
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (-(2.0 * self.log_alpha(t)).exp_m1()).sqrt()
    }

    /// log-SNR `log(α/σ)`; +∞ at t = 0.
    pub fn lambda(&self, t: f64) -> f64 {
        let la = self.log_alpha(t);
        la - 0.5 * (-(2.0 * la).exp_m1()).ln()
    }

    /// Drift rate `f = d log α / dt`.
    pub fn drift(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    /// Squared diffusion `g² = dσ²/dt - 2fσ²`.
    pub fn diffusion2(&self, t: f64) -> f64 {
        let f = self.drift(t);
        let a2 = (2.0 * self.log_alpha(t)).exp();
        let s2 = 1.0 - a2;
        // dσ²/dt = -dα²/dt = -2fα²
        -2.0 * f * a2 - 2.0 * f * s2
    }

    /// `dλ/dt = f / σ²` for VP.
    pub fn dlambda_dt(&self, t: f64) -> f64 {
        let s2 = -(2.0 * self.log_alpha(t)).exp_m1();
        self.drift(t) / s2
    }

    /// α as a function of λ: `α² = 1/(1+e^{-2λ})`.
    pub fn alpha_of_lambda(&self, lam: f64) -> f64 {
        (-0.5 * (-2.0 * lam).exp().ln_1p()).exp()
    }

    /// σ as a function of λ: `σ² = 1/(1+e^{2λ})`.
    pub fn sigma_of_lambda(&self, lam: f64) -> f64 {
        (-0.5 * (2.0 * lam).exp().ln_1p()).exp()
    }

    /// Inverts λ(t) on (0, T] with a bracketed Newton iteration.
    pub fn time_of_lambda(&self, lam: f64) -> Result<f64> {
        let lam_top = self.lambda(self.t_max);
        if lam < lam_top - INVERSION_TOL {
            return Err(Error::Domain(format!(
                "lambda {lam} below lambda(T) = {lam_top}"
            )));
        }
        if lam <= lam_top {
            return Ok(self.t_max);
        }
        // λ decreases in t: keep lambda(lo) > lam > lambda(hi).
        let mut lo = 0.0_f64;
        let mut hi = self.t_max;
        let mut t = 0.5 * self.t_max;
        let mut best = f64::INFINITY;
        for _ in 0..300 {
            let r = self.lambda(t) - lam;
            best = best.min(r.abs());
            if r.abs() <= 1e-13 * (1.0 + lam.abs()) {
                return Ok(t);
            }
            if r > 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let slope = self.dlambda_dt(t);
            let newton = t - r / slope;
            t = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        let r = (self.lambda(t) - lam).abs();
        if r <= INVERSION_TOL {
            Ok(t)
        } else {
            Err(Error::Convergence {
                what: "lambda inversion".into(),
                residual: best.min(r),
            })
        }
    }
}

/// Grid of M+1 reverse-time nodes, uniform in λ.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t: Vec<f64>,
    pub lam: Vec<f64>,
    pub h: Vec<f64>,
}

impl TimeGrid {
    /// Number of steps M.
    pub fn steps(&self) -> usize {
        self.h.len()
    }

    /// Number of nodes M+1.
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Builds a λ-uniform grid from `t_start` down to `t_end`.
pub fn make_lambda_grid(
    s: &NoiseSchedule,
    t_start: f64,
    t_end: f64,
    m: usize,
) -> Result<TimeGrid> {
    if m == 0 {
        return Err(Error::Domain("grid needs M >= 1".into()));
    }
    let floor_tol = 1e-12 * s.t_max;
    if !(t_start > t_end) || t_end < s.t_floor - floor_tol || t_start > s.t_max + floor_tol {
        return Err(Error::Domain(format!(
            "need T >= t_start > t_end >= t_floor, got t_start={t_start}, t_end={t_end}, t_floor={}",
            s.t_floor
        )));
    }
    let l0 = s.lambda(t_start);
    let l1 = s.lambda(t_end);
    let mut t = Vec::with_capacity(m + 1);
    t.push(t_start);
    for i in 1..m {
        let target = l0 + (l1 - l0) * i as f64 / m as f64;
        t.push(s.time_of_lambda(target)?);
    }
    t.push(t_end);
    let lam: Vec<f64> = t.iter().map(|&ti| s.lambda(ti)).collect();
    let h: Vec<f64> = lam.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(TimeGrid { t, lam, h })
}

/// Grid over the full default range `[T, t_floor]`.
pub fn default_grid(s: &NoiseSchedule, m: usize) -> Result<TimeGrid> {
    make_lambda_grid(s, s.t_max, s.t_floor, m)
}

/// Below this step the bracket is summed as a tail series (all terms positive).
const SERIES_SWITCH: f64 = 25.0;

/// `1 - e^{-h} Σ_{k≤n} h^k/k!`, the regularized lower incomplete gamma P(n+1, h).
pub fn taylor_bracket(n: usize, h: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    if h < SERIES_SWITCH {
        // e^{-h} Σ_{k>n} h^k/k!
        let mut term = 1.0;
        for k in 1..=n + 1 {
            term *= h / k as f64;
        }
        let mut sum = 0.0;
        let mut k = n + 1;
        loop {
            sum += term;
            k += 1;
            term *= h / k as f64;
            if term < 1e-18 * sum {
                break;
            }
        }
        (-h).exp() * sum
    } else {
        let mut term = 1.0;
        let mut partial = 1.0;
        for k in 1..=n {
            term *= h / k as f64;
            partial += term;
        }
        1.0 - (-h).exp() * partial
    }
}

/// `I_n = ∫_{λs}^{λt} e^{-λ}(λ-λs)^n/n! dλ`.
pub fn taylor_integral(n: usize, lam_s: f64, lam_t: f64) -> Result<f64> {
    if !(lam_t > lam_s) || !lam_s.is_finite() || !lam_t.is_finite() {
        return Err(Error::Domain(format!(
            "taylor integral needs lam_t > lam_s, got ({lam_s}, {lam_t})"
        )));
    }
    Ok((-lam_s).exp() * taylor_bracket(n, lam_t - lam_s))
}

/// `h^{n+1} φ_{n+1}(h) = e^h · taylor_bracket(n, h)`.
pub fn phi_moment(n: usize, h: f64) -> f64 {
    h.exp() * taylor_bracket(n, h)
}
