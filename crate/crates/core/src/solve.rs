//! Classical stand-ins for the quantum linear-system layer.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::system::BlockLinearSystem;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverTag {
    Forward,
    Gmres,
}

impl fmt::Display for SolverTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverTag::Forward => "forward",
            SolverTag::Gmres => "gmres",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub solution: DVector<f64>,
    /// `‖M x − b‖ / ‖b‖`, recomputed after the solve.
    pub residual: f64,
    pub iterations: usize,
    pub wall_time: Duration,
    pub solver: SolverTag,
}

impl SolveResult {
    pub const CSV_HEADER: &'static str = "solver,iterations,residual,wall_ms";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6e},{:.3}", self.solver, self.iterations, self.residual, self.wall_time.as_secs_f64() * 1e3)
    }
}

pub fn relative_residual(sys: &BlockLinearSystem, x: &DVector<f64>) -> Result<f64> {
    let r = sys.mat.mul_vec(x)? - &sys.rhs;
    let bn = sys.rhs.norm();
    Ok(if bn > 0.0 { r.norm() / bn } else { r.norm() })
}

/// Direct sweep over the lower-triangular system matrix.
pub fn forward_substitute(sys: &BlockLinearSystem) -> Result<SolveResult> {
    let start = Instant::now();
    let solution = sys.mat.solve_lower(&sys.rhs)?;
    let wall_time = start.elapsed();
    let residual = relative_residual(sys, &solution)?;
    Ok(SolveResult { solution, residual, iterations: 0, wall_time, solver: SolverTag::Forward })
}

/// Restarted GMRES(`restart`) from a zero initial guess; `max_iter` counts inner iterations.
pub fn gmres_solve(sys: &BlockLinearSystem, tol: f64, max_iter: usize, restart: usize) -> Result<SolveResult> {
    if !(tol > 0.0) || restart == 0 {
        return Err(Error::Domain("gmres needs tol > 0 and restart ≥ 1".into()));
    }
    let start = Instant::now();
    let a = &sys.mat;
    let n = sys.dim();
    let bn = sys.rhs.norm();
    let mut x = DVector::zeros(n);
    if bn == 0.0 {
        return Ok(SolveResult { solution: x, residual: 0.0, iterations: 0, wall_time: start.elapsed(), solver: SolverTag::Gmres });
    }
    let mut iterations = 0;
    let mut best = f64::INFINITY;
    loop {
        let r = &sys.rhs - a.mul_vec(&x)?;
        let beta = r.norm();
        best = best.min(beta / bn);
        if beta / bn <= tol {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::NonConvergence { iterations, residual: best });
        }
        let m = restart.min(max_iter - iterations);
        let mut v: Vec<DVector<f64>> = vec![r / beta];
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = DVector::zeros(m + 1);
        g[0] = beta;
        let mut used = 0;
        let mut breakdown = false;
        for j in 0..m {
            let mut w = a.mul_vec(&v[j])?;
            // modified Gram-Schmidt
            for (i, vi) in v.iter().enumerate() {
                h[(i, j)] = w.dot(vi);
                w.axpy(-h[(i, j)], vi, 1.0);
            }
            let wn = w.norm();
            h[(j + 1, j)] = wn;
            for i in 0..j {
                let tmp = cs[i] * h[(i, j)] + sn[i] * h[(i + 1, j)];
                h[(i + 1, j)] = -sn[i] * h[(i, j)] + cs[i] * h[(i + 1, j)];
                h[(i, j)] = tmp;
            }
            let den = h[(j, j)].hypot(h[(j + 1, j)]);
            if den == 0.0 {
                return Err(Error::Breakdown(iterations));
            }
            cs[j] = h[(j, j)] / den;
            sn[j] = h[(j + 1, j)] / den;
            h[(j, j)] = den;
            h[(j + 1, j)] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            iterations += 1;
            if g[j + 1].abs() / bn <= tol {
                break;
            }
            if wn <= f64::EPSILON * beta {
                breakdown = true;
                break;
            }
            v.push(w / wn);
        }
        // back substitution on the rotated Hessenberg matrix
        let mut y = DVector::zeros(used);
        for i in (0..used).rev() {
            let mut acc = g[i];
            for k in i + 1..used {
                acc -= h[(i, k)] * y[k];
            }
            y[i] = acc / h[(i, i)];
        }
        for (i, vi) in v.iter().take(used).enumerate() {
            x.axpy(y[i], vi, 1.0);
        }
        if breakdown {
            let res = (&sys.rhs - a.mul_vec(&x)?).norm() / bn;
            if res > tol {
                return Err(Error::Breakdown(iterations));
            }
        }
    }
    let wall_time = start.elapsed();
    let residual = relative_residual(sys, &x)?;
    Ok(SolveResult { solution: x, residual, iterations, wall_time, solver: SolverTag::Gmres })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LchsKernel {
    /// `1/(π(1+k²))`
    #[default]
    Cauchy,
}

impl LchsKernel {
    pub fn eval(self, k: f64) -> f64 {
        match self {
            LchsKernel::Cauchy => 1.0 / (std::f64::consts::PI * (1.0 + k * k)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LchsConfig {
    /// Quadrature interval is `[-k_max, k_max]`.
    pub k_max: f64,
    pub nodes: usize,
    pub substeps: usize,
    pub kernel: LchsKernel,
    /// Rescale quadrature weights to sum to one.
    pub normalize: bool,
}

impl Default for LchsConfig {
    fn default() -> Self {
        Self { k_max: 32.0, nodes: 257, substeps: 64, kernel: LchsKernel::Cauchy, normalize: false }
    }
}

impl LchsConfig {
    /// `nodes_per_unit` quadrature points per unit of `k_max` (plus one), as in a density-preserving sweep.
    pub fn with_density(k_max: f64, nodes_per_unit: usize) -> Self {
        Self { k_max, nodes: (nodes_per_unit as f64 * k_max).round() as usize + 1, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.k_max > 0.0) || self.nodes < 2 || self.substeps == 0 {
            return Err(Error::Domain("LCHS needs K > 0, nodes ≥ 2 and substeps ≥ 1".into()));
        }
        Ok(())
    }

    /// Trapezoidal nodes and kernel weights.
    pub fn quadrature(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.nodes;
        let dk = 2.0 * self.k_max / (n - 1) as f64;
        let ks: Vec<f64> = (0..n).map(|j| -self.k_max + dk * j as f64).collect();
        let mut ws: Vec<f64> = ks.iter().map(|&k| dk * self.kernel.eval(k)).collect();
        ws[0] *= 0.5;
        ws[n - 1] *= 0.5;
        if self.normalize {
            let total: f64 = ws.iter().sum();
            ws.iter_mut().for_each(|w| *w /= total);
        }
        (ks, ws)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LchsSolution {
    pub u: DVector<f64>,
    /// Stability shift μ applied to the Hermitian part.
    pub shift: f64,
}

type C64 = Complex<f64>;

/// Approximates `u(T)` for `u' = −A(t) u + b(t)` by the kernel-weighted superposition of the
/// unitary evolutions generated by `k·L + H`.
pub fn lchs_solve(
    a: &(dyn Fn(f64) -> DMatrix<f64> + Sync),
    b: Option<&(dyn Fn(f64) -> DVector<f64> + Sync)>,
    u0: &DVector<f64>,
    t_end: f64,
    cfg: &LchsConfig,
) -> Result<LchsSolution> {
    cfg.validate()?;
    if !(t_end >= 0.0) {
        return Err(Error::Domain("LCHS needs T ≥ 0".into()));
    }
    let n = u0.len();
    let dt = t_end / cfg.substeps as f64;
    let mids: Vec<f64> = (0..cfg.substeps).map(|s| (s as f64 + 0.5) * dt).collect();

    // Hermitian and anti-Hermitian parts at every midpoint; shift from the most negative eigenvalue
    let mut parts = Vec::with_capacity(mids.len());
    let mut min_eig = f64::INFINITY;
    for &tm in &mids {
        let am = a(tm);
        if am.nrows() != n || am.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: am.nrows() });
        }
        let l = (&am + am.transpose()) * 0.5;
        let skew = (&am - am.transpose()) * 0.5;
        let eig = SymmetricEigen::try_new(l.clone(), 1e-14, 10_000)
            .ok_or_else(|| Error::Eigen("Hermitian part".into()))?;
        min_eig = min_eig.min(eig.eigenvalues.min());
        parts.push((l, skew));
    }
    let shift = (-min_eig).max(0.0) + 1e-12;
    for (l, _) in &parts {
        let shifted = l + DMatrix::identity(n, n) * shift;
        let me = SymmetricEigen::new(shifted).eigenvalues.min();
        if me < -1e-10 {
            return Err(Error::StabilityShift { min_eig: me });
        }
    }
    let sources: Vec<DVector<f64>> = match b {
        Some(b) => mids
            .iter()
            .map(|&tm| {
                let v = b(tm);
                if v.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: v.len() });
                }
                Ok(v * (-shift * tm).exp())
            })
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    let (ks, ws) = cfg.quadrature();
    let u0c: DVector<C64> = u0.map(|v| C64::new(v, 0.0));
    let per_node: Vec<DVector<C64>> = ks
        .par_iter()
        .map(|&k| {
            let mut u = u0c.clone();
            for (s, (l, skew)) in parts.iter().enumerate() {
                // generator −i(kL_shift + H) = −ik(L + μI) − (A − Aᵀ)/2 in the real case
                let mut gen = DMatrix::<C64>::zeros(n + 1, n + 1);
                for r in 0..n {
                    for c in 0..n {
                        let lv = l[(r, c)] + if r == c { shift } else { 0.0 };
                        gen[(r, c)] = C64::new(-skew[(r, c)], -k * lv) * dt;
                    }
                }
                if !sources.is_empty() {
                    for r in 0..n {
                        gen[(r, n)] = C64::new(sources[s][r] * dt, 0.0);
                    }
                }
                let e = gen.exp();
                let prop = e.view((0, 0), (n, n));
                let mut next = prop * &u;
                if !sources.is_empty() {
                    next += e.view((0, n), (n, 1));
                }
                u = next;
            }
            u
        })
        .collect();
    let mut acc = DVector::<f64>::zeros(n);
    for (u, w) in per_node.iter().zip(&ws) {
        acc += u.map(|c| c.re) * *w;
    }
    Ok(LchsSolution { u: acc * (shift * t_end).exp(), shift })
}

/// 2×2 symmetric positive-definite test problem `u' = −A u + b(t)` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdBenchmark {
    pub a: DMatrix<f64>,
    pub u0: DVector<f64>,
    pub t_end: f64,
}

impl PsdBenchmark {
    pub fn new() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            u0: DVector::from_vec(vec![1.0, -0.5]),
            t_end: 1.0,
        }
    }

    pub fn source(t: f64) -> DVector<f64> {
        DVector::from_vec(vec![1.0, 0.5 * t.cos()])
    }
}

impl Default for PsdBenchmark {
    fn default() -> Self {
        Self::new()
    }
}

/// Query-count scaling model `p·J·κ·max(log₂(N/eps), 1)^c_poly` with unit constant.
pub fn qlss_cost_model(kappa: f64, eps: f64, j: usize, p: usize, n: usize, c_poly: f64) -> Result<f64> {
    if !(kappa > 0.0 && eps > 0.0 && c_poly > 0.0) || j == 0 || p == 0 || n == 0 {
        return Err(Error::Domain("cost model arguments must be positive".into()));
    }
    let polylog = (n as f64 / eps).log2().max(1.0).powf(c_poly);
    Ok(kappa * polylog * j as f64 * p as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carleman::{assemble_dpm_qcms, lift, CarlemanBasis};
    use crate::model::presets;
    use crate::schedule::{default_grid, NoiseSchedule};
    use crate::sparse::CsrMatrix;
    use crate::system::{assemble_global_dpm, BlockLayout, SystemScheme};

    fn wrap(mat: CsrMatrix, rhs: DVector<f64>) -> BlockLinearSystem {
        let n = mat.nrows;
        BlockLinearSystem {
            mat,
            rhs,
            layout: BlockLayout { time_blocks: 1, lifted_dim: n, corrector_dim: 0 },
            scheme: SystemScheme::Dpm,
        }
    }

    fn dpm_system(n: usize, steps: usize) -> BlockLinearSystem {
        let s = NoiseSchedule::vp(0.1, 20.0, 1.0).unwrap();
        let grid = default_grid(&s, steps).unwrap();
        let basis = CarlemanBasis::new(1, n).unwrap();
        let y0 = lift(&DVector::from_element(1, 0.01), &basis, grid.t[0]).unwrap();
        let q = assemble_dpm_qcms(&s, &presets::weak_quadratic(), &grid, 2, &basis).unwrap();
        assemble_global_dpm(&q, &y0).unwrap()
    }

    #[test]
    fn identity_solves() {
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let sys = wrap(CsrMatrix::identity(3), rhs.clone());
        let f = forward_substitute(&sys).unwrap();
        assert_eq!(f.solution, rhs);
        assert_eq!(f.residual, 0.0);
        let g = gmres_solve(&sys, 1e-12, 100, 20).unwrap();
        assert_eq!(g.iterations, 1);
        assert!((g.solution - rhs).norm() < 1e-14);
    }

    #[test]
    fn gmres_diagonal_exactness() {
        let d = DVector::from_vec(vec![1.0, 2.0, 2.0, 3.0, 1.0, 3.0]);
        let sys = wrap(CsrMatrix::from_dense(&DMatrix::from_diagonal(&d)), DVector::from_element(6, 1.0));
        let g = gmres_solve(&sys, 1e-12, 100, 50).unwrap();
        assert!(g.iterations <= 3, "{}", g.iterations);
    }

    #[test]
    fn gmres_matches_forward() {
        let sys = dpm_system(4, 12);
        let f = forward_substitute(&sys).unwrap();
        assert!(f.residual <= 1e-12);
        let g = gmres_solve(&sys, 1e-10, 2000, 60).unwrap();
        assert!(g.residual <= 1e-10);
        assert!((&g.solution - &f.solution).norm() <= 1e-8 * f.solution.norm());
        let recomputed = relative_residual(&sys, &g.solution).unwrap();
        assert!(recomputed <= g.residual + 1e-13);
    }

    #[test]
    fn gmres_reports_nonconvergence() {
        let sys = dpm_system(4, 12);
        let err = gmres_solve(&sys, 1e-14, 3, 3).unwrap_err();
        assert!(err.is_non_convergence());
    }

    #[test]
    fn forward_rejects_upper_entries() {
        let m = CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert!(matches!(forward_substitute(&wrap(m, DVector::zeros(2))), Err(Error::Structure(_))));
    }

    #[test]
    fn lchs_identity_evolution() {
        let zero = |_t: f64| DMatrix::zeros(2, 2);
        let u0 = DVector::from_vec(vec![0.3, -1.2]);
        let cfg = LchsConfig { normalize: true, ..LchsConfig::default() };
        let u = lchs_solve(&zero, None, &u0, 1.0, &cfg).unwrap().u;
        assert!((u - &u0).norm() < 1e-10);
    }

    #[test]
    fn lchs_scalar_decay_converges_in_k() {
        let one = |_t: f64| DMatrix::from_element(1, 1, 1.0);
        let u0 = DVector::from_element(1, 1.0);
        let exact = (-1.0f64).exp();
        let mut prev = f64::INFINITY;
        for k in [8.0, 16.0, 32.0, 64.0] {
            let cfg = LchsConfig { normalize: true, ..LchsConfig::with_density(k, 8) };
            let err = (lchs_solve(&one, None, &u0, 1.0, &cfg).unwrap().u[0] - exact).abs();
            assert!(err <= prev * 0.55, "K={k}: {err} vs {prev}");
            prev = err;
        }
        assert!(prev < 5e-3);
    }

    #[test]
    fn lchs_shift_handles_growth() {
        // A = -0.5 gives growth e^{0.5}; L is made PSD by the shift
        let a = |_t: f64| DMatrix::from_element(1, 1, -0.5);
        let u0 = DVector::from_element(1, 1.0);
        let cfg = LchsConfig { normalize: true, ..LchsConfig::with_density(64.0, 8) };
        let sol = lchs_solve(&a, None, &u0, 1.0, &cfg).unwrap();
        assert!(sol.shift >= 0.5);
        assert!((sol.u[0] - 0.5f64.exp()).abs() < 1e-2);
    }

    fn integrating_factor_oracle(bm: &PsdBenchmark) -> DVector<f64> {
        // Simpson on e^{-A(T-s)} b(s)
        let n = 4000;
        let mut acc = DVector::zeros(2);
        for i in 0..=n {
            let s = bm.t_end * i as f64 / n as f64;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += (-&bm.a * (bm.t_end - s)).exp() * PsdBenchmark::source(s) * w;
        }
        (-&bm.a * bm.t_end).exp() * &bm.u0 + acc * (bm.t_end / (3.0 * n as f64))
    }

    #[test]
    fn lchs_psd_benchmark() {
        let bm = PsdBenchmark::new();
        let exact = integrating_factor_oracle(&bm);
        let a = |_t: f64| bm.a.clone();
        let mut prev = f64::INFINITY;
        for k in [8.0, 16.0, 32.0, 64.0] {
            let cfg = LchsConfig::with_density(k, 8);
            let u = lchs_solve(&a, Some(&PsdBenchmark::source), &bm.u0, bm.t_end, &cfg).unwrap().u;
            let err = (u - &exact).norm();
            assert!(err <= prev, "K={k}: {err:e}");
            prev = err;
            if k == 32.0 {
                assert_eq!(cfg.nodes, 257);
                assert!(err <= 1e-3);
            }
        }
        assert!(prev <= 1e-4);
    }

    #[test]
    fn cost_model_scaling() {
        let c = qlss_cost_model(10.0, 1e-3, 2, 1, 64, 2.0).unwrap();
        assert_eq!(qlss_cost_model(20.0, 1e-3, 2, 1, 64, 2.0).unwrap(), 2.0 * c);
        assert_eq!(qlss_cost_model(10.0, 1e-3, 2, 3, 64, 2.0).unwrap(), 3.0 * c);
        assert_eq!(qlss_cost_model(10.0, 1e-3, 4, 1, 64, 2.0).unwrap(), 2.0 * c);
        let expect = 2.0 * 10.0 * (64.0f64 / 1e-3).log2().powi(2);
        assert!((c - expect).abs() <= 1e-12 * expect);
        assert!(qlss_cost_model(0.0, 1e-3, 2, 1, 64, 2.0).is_err());
    }
}
