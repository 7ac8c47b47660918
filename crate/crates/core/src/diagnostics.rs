//! Jacobian spectra, the dissipativity measure P, truncation sweeps and order sweeps.

use nalgebra::{DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::carleman::{consistency_defect, CarlemanBasis, TruncationPolicy};
use crate::model::{drift_jacobian, Jacobian, PolyNoiseModel};
use crate::reference::{run_scheme, BVariant, Scheme, SolverRun, UniOptions, DEFAULT_ORACLE_SUBSTEPS};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::system::{build_system, condition_number};
use crate::{Error, Result};

/// Eigenvalues of `J + Jᵀ` along a trajectory, ascending per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTrace {
    pub t: Vec<f64>,
    pub eigenvalues: Vec<Vec<f64>>,
    /// `max |λ|` over the trace; P uses this field, so an external normalization may be substituted.
    pub normalization: f64,
}

impl SpectrumTrace {
    pub fn from_eigenvalues(t: Vec<f64>, eigenvalues: Vec<Vec<f64>>) -> Result<Self> {
        if t.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch { expected: t.len(), got: eigenvalues.len() });
        }
        if let Some(d) = eigenvalues.first().map(Vec::len) {
            if let Some(bad) = eigenvalues.iter().find(|e| e.len() != d) {
                return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
            }
        }
        let normalization = eigenvalues.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(Self { t, eigenvalues, normalization })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.first().map_or(0, Vec::len)
    }
}

pub fn symmetrized_eigenvalues(j: &Jacobian) -> Result<Vec<f64>> {
    let mut ev = match j {
        Jacobian::Diagonal(d) => d.iter().map(|v| 2.0 * v).collect::<Vec<_>>(),
        Jacobian::Dense(m) => {
            let sym = m + m.transpose();
            SymmetricEigen::try_new(sym, 1e-15, 10_000)
                .ok_or_else(|| Error::Eigen("symmetrized Jacobian".into()))?
                .eigenvalues
                .iter()
                .copied()
                .collect()
        }
    };
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn spectrum_trace(s: &NoiseSchedule, m: &PolyNoiseModel, run: &SolverRun) -> Result<SpectrumTrace> {
    let mut t = Vec::with_capacity(run.states.len());
    let mut eigs = Vec::with_capacity(run.states.len());
    for p in &run.states {
        let j = drift_jacobian(s, m, &p.x, p.t)?;
        eigs.push(symmetrized_eigenvalues(&j)?);
        t.push(p.t);
    }
    SpectrumTrace::from_eigenvalues(t, eigs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PTrace {
    pub p: Vec<f64>,
    /// Normalized eigenvalues per step.
    pub a: Vec<Vec<f64>>,
    /// Set when every eigenvalue is zero; P is then defined as 1.
    pub all_zero: bool,
}

/// `P(t_s) = (1/d) Σ_i Π_{s' ≤ s} (1 − a_i(t_s'))` over the realized grid.
pub fn dissipativity_p(trace: &SpectrumTrace) -> Result<PTrace> {
    if trace.eigenvalues.is_empty() || trace.dim() == 0 {
        return Err(Error::Domain("empty spectrum trace".into()));
    }
    let steps = trace.eigenvalues.len();
    let d = trace.dim();
    if trace.normalization == 0.0 {
        return Ok(PTrace { p: vec![1.0; steps], a: vec![vec![0.0; d]; steps], all_zero: true });
    }
    let a: Vec<Vec<f64>> = trace
        .eigenvalues
        .iter()
        .map(|row| row.iter().map(|l| l / trace.normalization).collect())
        .collect();
    let mut prod = vec![1.0; d];
    let mut p = Vec::with_capacity(steps);
    for row in &a {
        for (acc, ai) in prod.iter_mut().zip(row) {
            *acc *= 1.0 - ai;
        }
        p.push(prod.iter().sum::<f64>() / d as f64);
    }
    Ok(PTrace { p, a, all_zero: false })
}

/// One row of a truncation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationRow {
    pub order: usize,
    /// Endpoint block-1 error against the RK4 oracle.
    pub err_oracle: f64,
    /// Endpoint block-1 error against the nonlinear scheme on the same grid.
    pub err_scheme: f64,
    /// Final consistency defect `‖y_2 − y_1⊗y_1‖`.
    pub defect: f64,
    pub kappa: f64,
}

impl TruncationRow {
    pub const CSV_HEADER: &'static str = "N,err_oracle,err_scheme,defect,kappa";

    pub fn csv_row(&self) -> String {
        format!("{},{:.10e},{:.10e},{:.10e},{:.10e}", self.order, self.err_oracle, self.err_scheme, self.defect, self.kappa)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub policy: TruncationPolicy,
    pub bh: BVariant,
    pub oracle_substeps: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { policy: TruncationPolicy::Hard, bh: BVariant::default(), oracle_substeps: DEFAULT_ORACLE_SUBSTEPS }
    }
}

/// Carleman endpoint error, defect and κ for every order in `orders` (rows in input order).
pub fn truncation_sweep(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    scheme: Scheme,
    orders: &[usize],
    opts: &SweepOptions,
) -> Result<Vec<TruncationRow>> {
    let uni = UniOptions { bh: opts.bh, ..UniOptions::default() };
    let oracle = run_scheme(s, m, x_t, grid, Scheme::Oracle { substeps: opts.oracle_substeps }, &uni)?;
    let nonlinear = run_scheme(s, m, x_t, grid, scheme, &uni)?;
    orders
        .par_iter()
        .map(|&n| {
            let basis = CarlemanBasis::new(m.dim(), n)?.with_policy(opts.policy);
            let build = build_system(s, m, x_t, grid, scheme, opts.bh, &basis)?;
            let run = &build.sequential;
            let end = run.block1(&basis).pop().expect("lifted runs are nonempty");
            let kappa = condition_number(&build.system)?.kappa;
            Ok(TruncationRow {
                order: n,
                err_oracle: (&end - oracle.endpoint()).norm(),
                err_scheme: (&end - nonlinear.endpoint()).norm(),
                defect: consistency_defect(run.states.last().expect("nonempty"), &basis),
                kappa,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub steps: usize,
    /// Mean log-SNR step.
    pub h: f64,
    pub err: f64,
    /// Below the error floor and left out of the fit.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderSweep {
    pub rows: Vec<OrderRow>,
    pub slope: f64,
    pub floor: f64,
}

impl OrderSweep {
    pub const CSV_HEADER: &'static str = "M,h,err,excluded";

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| format!("{},{:.10e},{:.10e},{}", r.steps, r.h, r.err, r.excluded as u8))
            .collect()
    }
}

/// Least-squares slope of log(error) against log(h); errors below `floor` are excluded.
pub fn order_sweep(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    scheme: Scheme,
    grids: &[TimeGrid],
    opts: &SweepOptions,
    floor: f64,
) -> Result<OrderSweep> {
    if grids.len() < 4 {
        return Err(Error::Domain(format!("order sweep needs at least 4 grids, got {}", grids.len())));
    }
    let uni = UniOptions { bh: opts.bh, ..UniOptions::default() };
    let oracle_grid = crate::schedule::make_lambda_grid(s, grids[0].t[0], *grids[0].t.last().expect("nonempty"), 1)?;
    let oracle = run_scheme(s, m, x_t, &oracle_grid, Scheme::Oracle { substeps: opts.oracle_substeps }, &uni)?;
    let rows: Vec<OrderRow> = grids
        .par_iter()
        .map(|g| {
            let run = run_scheme(s, m, x_t, g, scheme, &uni)?;
            let err = (run.endpoint() - oracle.endpoint()).norm();
            let h = (g.lam.last().expect("nonempty") - g.lam[0]) / g.steps() as f64;
            Ok(OrderRow { steps: g.steps(), h, err, excluded: !(err > floor) })
        })
        .collect::<Result<_>>()?;
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| !r.excluded).map(|r| (r.h.ln(), r.err.ln())).collect();
    if pts.len() < 2 {
        return Err(Error::Convergence { what: "order sweep: error floor reached".into(), residual: floor });
    }
    Ok(OrderSweep { slope: ls_slope(&pts), rows, floor })
}

pub fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
