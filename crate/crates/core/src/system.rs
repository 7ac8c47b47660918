//! Global all-steps linear systems and their sparsity and conditioning.

use std::fmt;

use nalgebra::DVector;

use crate::carleman::{
    assemble_all_unipc_qcms, assemble_dpm_qcms, lift, run_lifted_dpm, run_lifted_unipc, CarlemanBasis,
    LiftedRun, LiftedState, Qcm, UniPcQcm,
};
use crate::model::PolyNoiseModel;
use crate::reference::{BVariant, Scheme};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::sparse::{CsrMatrix, Triplets};
use crate::{Error, Result};

/// Dense SVD is used up to this dimension.
pub const DENSE_SVD_MAX_DIM: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemScheme {
    Dpm,
    UniPc,
}

impl fmt::Display for SystemScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemScheme::Dpm => "dpm",
            SystemScheme::UniPc => "unipc",
        })
    }
}

/// Time block `i` occupies `[i·block_dim, (i+1)·block_dim)`; inside it the lifted state comes
/// first and the corrected state (if any) last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub time_blocks: usize,
    pub lifted_dim: usize,
    pub corrector_dim: usize,
}

impl BlockLayout {
    pub fn block_dim(&self) -> usize {
        self.lifted_dim + self.corrector_dim
    }

    pub fn dim(&self) -> usize {
        self.time_blocks * self.block_dim()
    }

    pub fn lifted_offset(&self, i: usize) -> usize {
        i * self.block_dim()
    }

    pub fn corrector_offset(&self, i: usize) -> usize {
        i * self.block_dim() + self.lifted_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLinearSystem {
    pub mat: CsrMatrix,
    pub rhs: DVector<f64>,
    pub layout: BlockLayout,
    pub scheme: SystemScheme,
}

impl BlockLinearSystem {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Splits a solution vector into per-block lifted and corrected states.
    pub fn split(&self, sol: &DVector<f64>, times: &[f64]) -> Result<LiftedRun> {
        let l = self.layout;
        if sol.len() != l.dim() {
            return Err(Error::DimensionMismatch { expected: l.dim(), got: sol.len() });
        }
        if times.len() != l.time_blocks {
            return Err(Error::DimensionMismatch { expected: l.time_blocks, got: times.len() });
        }
        let states = (0..l.time_blocks)
            .map(|i| LiftedState { y: sol.rows(l.lifted_offset(i), l.lifted_dim).into_owned(), t: times[i] })
            .collect();
        let corrected = (l.corrector_dim > 0).then(|| {
            (0..l.time_blocks).map(|i| sol.rows(l.corrector_offset(i), l.corrector_dim).into_owned()).collect()
        });
        Ok(LiftedRun { states, corrected })
    }
}

/// Block lower-bidiagonal system `Y_0 = lift(x_T)`, `Y_i - (I + A_i) Y_{i-1} = b_i`.
pub fn assemble_global_dpm(qcms: &[Qcm], y0: &LiftedState) -> Result<BlockLinearSystem> {
    let n = y0.y.len();
    let layout = BlockLayout { time_blocks: qcms.len() + 1, lifted_dim: n, corrector_dim: 0 };
    let dim = layout.dim();
    let mut t = Triplets::new(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for r in 0..dim {
        t.push(r, r, 1.0);
    }
    rhs.rows_mut(0, n).copy_from(&y0.y);
    for (idx, q) in qcms.iter().enumerate() {
        let i = idx + 1;
        if q.a.nrows != n || q.a.ncols != n || q.b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: q.a.nrows.max(q.b.len()) });
        }
        if q.step != i {
            return Err(Error::Structure(format!("QCM for step {} supplied at position {i}", q.step)));
        }
        let (r0, c0) = (layout.lifted_offset(i), layout.lifted_offset(i - 1));
        for r in 0..n {
            t.push(r0 + r, c0 + r, -1.0);
        }
        t.push_csr(&q.a, r0, c0, -1.0);
        rhs.rows_mut(r0, n).copy_from(&q.b);
    }
    Ok(BlockLinearSystem { mat: t.into_csr(), rhs, layout, scheme: SystemScheme::Dpm })
}

/// Banded UniPC system; with a corrector each time block is `[Y_i; z_i]` and `z0` is required.
pub fn assemble_global_unipc(
    qcms: &[UniPcQcm],
    y0: &LiftedState,
    z0: Option<&DVector<f64>>,
    basis: &CarlemanBasis,
) -> Result<BlockLinearSystem> {
    let n = y0.y.len();
    if n != basis.dim_total {
        return Err(Error::DimensionMismatch { expected: basis.dim_total, got: n });
    }
    let has_corrector = qcms.first().map_or(z0.is_some(), |q| q.corrector.is_some());
    if has_corrector != z0.is_some() || qcms.iter().any(|q| q.corrector.is_some() != has_corrector) {
        return Err(Error::Structure("corrector blocks and initial corrected state disagree".into()));
    }
    let d = if has_corrector { basis.dim } else { 0 };
    let layout = BlockLayout { time_blocks: qcms.len() + 1, lifted_dim: n, corrector_dim: d };
    let dim = layout.dim();
    let mut t = Triplets::new(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for r in 0..dim {
        t.push(r, r, 1.0);
    }
    rhs.rows_mut(0, n).copy_from(&y0.y);
    if let Some(z0) = z0 {
        if z0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: z0.len() });
        }
        rhs.rows_mut(layout.corrector_offset(0), d).copy_from(z0);
    }
    let b1 = basis.block_range(1).start;

    for (idx, q) in qcms.iter().enumerate() {
        let i = idx + 1;
        if q.step != i {
            return Err(Error::Structure(format!("QCM for step {} supplied at position {i}", q.step)));
        }
        let r0 = layout.lifted_offset(i);
        for r in 0..n {
            t.push(r0 + r, layout.lifted_offset(i - 1) + r, -1.0);
        }
        let mut b = DVector::zeros(n);
        for nq in &q.predictor {
            if nq.grid_index >= i {
                return Err(Error::Structure(format!(
                    "unresolved node mapping: predictor node {} of step {i} points at block {}",
                    nq.node, nq.grid_index
                )));
            }
            if nq.a.nrows != n || nq.a.ncols != n || nq.b.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: nq.a.nrows });
            }
            t.push_csr(&nq.a, r0, layout.lifted_offset(nq.grid_index), -1.0);
            b += &nq.b;
        }
        rhs.rows_mut(r0, n).copy_from(&b);
        if let Some(c) = q.z_coupling {
            if !has_corrector {
                return Err(Error::Structure("corrector coupling without corrected state".into()));
            }
            for r in 0..d {
                t.push(r0 + b1 + r, layout.corrector_offset(i - 1) + r, -c);
            }
        }
        if let Some(cq) = &q.corrector {
            let zr = layout.corrector_offset(i);
            for r in 0..d {
                t.push(zr + r, layout.corrector_offset(i - 1) + r, -(1.0 + cq.b_scale));
            }
            let mut bc = DVector::zeros(d);
            for nq in &cq.nodes {
                if nq.grid_index > i {
                    return Err(Error::Structure(format!(
                        "unresolved node mapping: corrector node {} of step {i} points at block {}",
                        nq.node, nq.grid_index
                    )));
                }
                if nq.a.nrows != d || nq.a.ncols != n || nq.b.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: nq.a.nrows });
                }
                t.push_csr(&nq.a, zr, layout.lifted_offset(nq.grid_index), -1.0);
                bc += &nq.b;
            }
            rhs.rows_mut(zr, d).copy_from(&bc);
        }
    }
    Ok(BlockLinearSystem { mat: t.into_csr(), rhs, layout, scheme: SystemScheme::UniPc })
}

/// Global system together with the sequential lifted run it must reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanBuild {
    pub system: BlockLinearSystem,
    pub sequential: LiftedRun,
}

/// Lifts `x_t`, assembles every step of `scheme` and the global system; UniPC systems carry the
/// corrected state for `Scheme::UniPc` only.
pub fn build_system(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    scheme: Scheme,
    bh: BVariant,
    basis: &CarlemanBasis,
) -> Result<CarlemanBuild> {
    let y0 = lift(x_t, basis, grid.t[0])?;
    match scheme {
        Scheme::Dpm(k) => {
            let q = assemble_dpm_qcms(s, m, grid, k, basis)?;
            Ok(CarlemanBuild { system: assemble_global_dpm(&q, &y0)?, sequential: run_lifted_dpm(&q, &y0, grid)? })
        }
        Scheme::UniP(p) | Scheme::UniPc(p) => {
            let correct = matches!(scheme, Scheme::UniPc(_));
            let q = assemble_all_unipc_qcms(s, m, grid, p, bh, correct, basis)?;
            let z0 = correct.then(|| x_t.clone());
            Ok(CarlemanBuild {
                system: assemble_global_unipc(&q, &y0, z0.as_ref(), basis)?,
                sequential: run_lifted_unipc(&q, &y0, z0.as_ref(), basis, grid)?,
            })
        }
        Scheme::Oracle { .. } => Err(Error::Domain("the oracle has no Carleman form".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMethod {
    DenseSvd,
    PowerIteration,
}

impl fmt::Display for ConditionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionMethod::DenseSvd => "dense_svd",
            ConditionMethod::PowerIteration => "power_iteration",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionOptions {
    /// Relative eigen-residual at which each iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        Self { tol: 1e-3, max_iter: 10_000 }
    }
}

/// 2-norm condition number estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub kappa: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub method: ConditionMethod,
    pub iterations: usize,
    /// Achieved relative residuals of the σ_max and σ_min iterations (0 for dense SVD).
    pub residual_max: f64,
    pub residual_min: f64,
    pub s_row: usize,
    pub s_col: usize,
    pub nnz: usize,
    pub dim: usize,
}

/// Experiment coordinates written next to a condition report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemMeta {
    pub scheme: String,
    pub d: usize,
    pub j: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl ConditionReport {
    pub const CSV_HEADER: &'static str = "scheme,d,J,N,M,p,kappa,method,s_row,s_col,nnz,dim";

    pub fn csv_row(&self, meta: &SystemMeta) -> String {
        format!(
            "{},{},{},{},{},{},{:.10e},{},{},{},{},{}",
            meta.scheme, meta.d, meta.j, meta.n, meta.m, meta.p, self.kappa, self.method, self.s_row,
            self.s_col, self.nnz, self.dim
        )
    }
}

/// κ of the system matrix; dense SVD up to [`DENSE_SVD_MAX_DIM`], iterative above.
pub fn condition_number(sys: &BlockLinearSystem) -> Result<ConditionReport> {
    let method = if sys.dim() <= DENSE_SVD_MAX_DIM {
        ConditionMethod::DenseSvd
    } else {
        ConditionMethod::PowerIteration
    };
    condition_number_with(&sys.mat, method, ConditionOptions::default())
}

pub fn condition_number_with(
    mat: &CsrMatrix,
    method: ConditionMethod,
    opts: ConditionOptions,
) -> Result<ConditionReport> {
    if mat.nrows != mat.ncols {
        return Err(Error::DimensionMismatch { expected: mat.nrows, got: mat.ncols });
    }
    let dim = mat.nrows;
    if dim == 0 {
        return Err(Error::Domain("empty matrix".into()));
    }
    let (sigma_max, sigma_min, iterations, residual_max, residual_min) = match method {
        ConditionMethod::DenseSvd => {
            if dim > DENSE_SVD_MAX_DIM {
                return Err(Error::Capacity(format!("dense SVD limited to dimension {DENSE_SVD_MAX_DIM}")));
            }
            let sv = mat.to_dense().singular_values();
            let smax = sv.max();
            let smin = sv.min();
            (smax, smin, 0, 0.0, 0.0)
        }
        ConditionMethod::PowerIteration => {
            let apply = |v: &DVector<f64>| -> Result<DVector<f64>> { mat.tr_mul_vec(&mat.mul_vec(v)?) };
            let (lmax, it1, r1) = power_iterate(dim, opts, apply)?;
            let apply_inv = |v: &DVector<f64>| -> Result<DVector<f64>> {
                mat.solve_lower(&mat.solve_lower_transpose(v)?)
            };
            let (linv, it2, r2) = power_iterate(dim, opts, apply_inv)?;
            (lmax.sqrt(), 1.0 / linv.sqrt(), it1 + it2, r1, r2)
        }
    };
    if !(sigma_min > 0.0) {
        return Err(Error::Domain("matrix is singular".into()));
    }
    Ok(ConditionReport {
        kappa: (sigma_max / sigma_min).max(1.0),
        sigma_max,
        sigma_min,
        method,
        iterations,
        residual_max,
        residual_min,
        s_row: mat.max_row_nnz(),
        s_col: mat.max_col_nnz(),
        nnz: mat.nnz(),
        dim,
    })
}

/// Dominant eigenvalue of a symmetric positive operator; stops on relative eigen-residual.
fn power_iterate(
    dim: usize,
    opts: ConditionOptions,
    apply: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<(f64, usize, f64)> {
    // deterministic start with every component present
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let w = apply(&v)?;
        let theta = v.dot(&w);
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::Convergence { what: "power iteration".into(), residual });
        }
        residual = (&w - &v * theta).norm() / theta;
        let wn = w.norm();
        if residual <= opts.tol {
            return Ok((theta, it, residual));
        }
        v = w / wn;
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, residual })
}

/// `(‖Mx‖/‖x‖)·(‖M⁻¹y‖/‖y‖)`, a lower bound on κ₂ from two test vectors.
pub fn kappa_lower_bound(mat: &CsrMatrix, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let xn = x.norm();
    let yn = y.norm();
    if xn == 0.0 || yn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mx = mat.mul_vec(x)?.norm() / xn;
    let minv = mat.solve_lower(y)?.norm() / yn;
    Ok(mx * minv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityStats {
    pub s_row: usize,
    pub s_col: usize,
    pub nnz: usize,
    pub fill: f64,
}

pub fn sparsity_stats(sys: &BlockLinearSystem) -> SparsityStats {
    matrix_sparsity(&sys.mat)
}

pub fn matrix_sparsity(mat: &CsrMatrix) -> SparsityStats {
    let cells = (mat.nrows as f64) * (mat.ncols as f64);
    SparsityStats {
        s_row: mat.max_row_nnz(),
        s_col: mat.max_col_nnz(),
        nnz: mat.nnz(),
        fill: if cells > 0.0 { mat.nnz() as f64 / cells } else { 0.0 },
    }
}

/// Text export: a `rows cols nnz` header, then one 1-based `row col value` line per entry.
pub fn export_text(mat: &CsrMatrix) -> String {
    let mut out = format!("{} {} {}\n", mat.nrows, mat.ncols, mat.nnz());
    for r in 0..mat.nrows {
        for (c, v) in mat.row(r) {
            out.push_str(&format!("{} {} {:.16e}\n", r + 1, c + 1, v));
        }
    }
    out
}

pub fn import_text(text: &str) -> Result<CsrMatrix> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("missing header".into()))?;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad header field {s:?}"))))
        .collect::<Result<_>>()?;
    let [nrows, ncols, nnz] = h[..] else {
        return Err(Error::Parse(format!("header needs 3 fields, got {}", h.len())));
    };
    let mut t = Triplets::new(nrows, ncols);
    let mut count = 0;
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Parse(format!("entry line {}: {line:?}", ln + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        let r: usize = f[0].parse().map_err(|_| bad())?;
        let c: usize = f[1].parse().map_err(|_| bad())?;
        let v: f64 = f[2].parse().map_err(|_| bad())?;
        if r == 0 || c == 0 || r > nrows || c > ncols {
            return Err(bad());
        }
        t.push(r - 1, c - 1, v);
        count += 1;
    }
    if count != nnz {
        return Err(Error::Parse(format!("header declares {nnz} entries, found {count}")));
    }
    Ok(t.into_csr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::schedule::default_grid;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand::seq::SliceRandom;
    use rand_chacha::ChaCha8Rng;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp(0.1, 20.0, 1.0).unwrap()
    }

    fn dpm_system(m: &PolyNoiseModel, steps: usize, k: usize, order: usize) -> (BlockLinearSystem, LiftedRun) {
        let s = vp();
        let grid = default_grid(&s, steps).unwrap();
        let basis = CarlemanBasis::new(m.dim(), order).unwrap();
        let x = DVector::from_element(m.dim(), 0.4);
        let y0 = lift(&x, &basis, grid.t[0]).unwrap();
        let q = assemble_dpm_qcms(&s, m, &grid, k, &basis).unwrap();
        (assemble_global_dpm(&q, &y0).unwrap(), run_lifted_dpm(&q, &y0, &grid).unwrap())
    }

    #[test]
    fn trivial_dpm_systems() {
        let basis = CarlemanBasis::new(1, 3).unwrap();
        let y0 = lift(&DVector::from_element(1, 0.5), &basis, 1.0).unwrap();
        let sys = assemble_global_dpm(&[], &y0).unwrap();
        assert_eq!(sys.mat, CsrMatrix::identity(3));
        assert_eq!(sys.rhs, y0.y);
        let st = sparsity_stats(&sys);
        assert_eq!((st.s_row, st.s_col, st.nnz), (1, 1, 3));

        let zero = |step| Qcm {
            a: CsrMatrix::zeros(3, 3),
            b: DVector::zeros(3),
            step,
            scheme: crate::reference::Scheme::Dpm(1),
            node: 0,
            step_degree: 1,
        };
        let sys = assemble_global_dpm(&[zero(1), zero(2)], &y0).unwrap();
        let sol = sys.mat.solve_lower(&sys.rhs).unwrap();
        for i in 0..3 {
            assert_eq!(sol.rows(3 * i, 3), y0.y);
        }
    }

    #[test]
    fn dpm_forward_solve_matches_stepping() {
        let (sys, run) = dpm_system(&presets::weak_quadratic(), 8, 2, 4);
        let sol = sys.mat.solve_lower(&sys.rhs).unwrap();
        let times: Vec<f64> = run.states.iter().map(|s| s.t).collect();
        let split = sys.split(&sol, &times).unwrap();
        for (a, b) in split.states.iter().zip(&run.states) {
            assert!((&a.y - &b.y).norm() <= 1e-12 * (1.0 + b.y.norm()));
        }
    }

    #[test]
    fn dpm_row_sparsity_matches_scan() {
        let (sys, _) = dpm_system(&presets::weak_quadratic(), 8, 2, 4);
        let s = vp();
        let grid = default_grid(&s, 8).unwrap();
        let basis = CarlemanBasis::new(1, 4).unwrap();
        let q = assemble_dpm_qcms(&s, &presets::weak_quadratic(), &grid, 2, &basis).unwrap();
        // brute-force row scan of I + A_i
        let mut widest = 0;
        for qi in &q {
            let d = qi.a.to_dense() + DMatrix::identity(4, 4);
            for r in 0..4 {
                widest = widest.max(d.row(r).iter().filter(|v| **v != 0.0).count());
            }
        }
        assert_eq!(sparsity_stats(&sys).s_row, 1 + widest);
    }

    fn unipc_pair(m: &PolyNoiseModel, p: usize, correct: bool) -> (BlockLinearSystem, LiftedRun) {
        let s = vp();
        let grid = default_grid(&s, 8).unwrap();
        let basis = CarlemanBasis::new(m.dim(), 4).unwrap();
        let x = DVector::from_element(m.dim(), 0.4);
        let y0 = lift(&x, &basis, grid.t[0]).unwrap();
        let q = assemble_all_unipc_qcms(&s, m, &grid, p, BVariant::Bh2, correct, &basis).unwrap();
        let z0 = correct.then(|| x.clone());
        let sys = assemble_global_unipc(&q, &y0, z0.as_ref(), &basis).unwrap();
        let run = run_lifted_unipc(&q, &y0, z0.as_ref(), &basis, &grid).unwrap();
        (sys, run)
    }

    #[test]
    fn unipc_forward_solve_matches_stepping() {
        for (p, correct) in [(2, true), (3, true), (2, false), (3, false)] {
            let (sys, run) = unipc_pair(&presets::weak_quadratic(), p, correct);
            let sol = sys.mat.solve_lower(&sys.rhs).unwrap();
            let times: Vec<f64> = run.states.iter().map(|s| s.t).collect();
            let split = sys.split(&sol, &times).unwrap();
            for (a, b) in split.states.iter().zip(&run.states) {
                assert!((&a.y - &b.y).norm() <= 1e-12 * (1.0 + b.y.norm()), "p={p}");
            }
            assert_eq!(split.corrected.is_some(), correct);
            if let (Some(za), Some(zb)) = (&split.corrected, &run.corrected) {
                for (a, b) in za.iter().zip(zb) {
                    assert!((a - b).norm() <= 1e-12 * (1.0 + b.norm()));
                }
            }
        }
    }

    #[test]
    fn unip1_equals_dpm1() {
        let m = presets::cubic();
        let s = vp();
        let grid = default_grid(&s, 6).unwrap();
        let basis = CarlemanBasis::new(1, 4).unwrap();
        let y0 = lift(&DVector::from_element(1, 0.3), &basis, grid.t[0]).unwrap();
        let qd = assemble_dpm_qcms(&s, &m, &grid, 1, &basis).unwrap();
        let qu = assemble_all_unipc_qcms(&s, &m, &grid, 1, BVariant::Bh2, false, &basis).unwrap();
        let a = assemble_global_dpm(&qd, &y0).unwrap();
        let b = assemble_global_unipc(&qu, &y0, None, &basis).unwrap();
        assert_eq!(a.mat.col_idx, b.mat.col_idx);
        for (x, y) in a.mat.values.iter().zip(&b.mat.values) {
            assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn constant_eps_is_bidiagonal() {
        let m = PolyNoiseModel::scalar(&[(0, 0, 0.3)]).unwrap();
        let (sys, _) = unipc_pair(&m, 3, false);
        let n = sys.layout.block_dim();
        for r in 0..sys.dim() {
            for (c, _) in sys.mat.row(r) {
                assert!(r / n - c / n <= 1, "entry ({r},{c}) beyond the first subdiagonal block");
            }
        }
    }

    #[test]
    fn unresolved_mapping_is_rejected() {
        let m = presets::weak_quadratic();
        let s = vp();
        let grid = default_grid(&s, 4).unwrap();
        let basis = CarlemanBasis::new(1, 3).unwrap();
        let y0 = lift(&DVector::from_element(1, 0.3), &basis, grid.t[0]).unwrap();
        let mut q = assemble_all_unipc_qcms(&s, &m, &grid, 2, BVariant::Bh2, false, &basis).unwrap();
        q[2].predictor[1].grid_index = 3;
        assert!(matches!(assemble_global_unipc(&q, &y0, None, &basis), Err(Error::Structure(_))));
    }

    #[test]
    fn kappa_examples() {
        let r = condition_number_with(&CsrMatrix::identity(5), ConditionMethod::DenseSvd, Default::default())
            .unwrap();
        assert!((r.kappa - 1.0).abs() < 1e-14);
        let d = CsrMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])));
        for method in [ConditionMethod::DenseSvd, ConditionMethod::PowerIteration] {
            let r = condition_number_with(&d, method, Default::default()).unwrap();
            assert!((r.kappa - 2.0).abs() < 1e-4, "{method}: {}", r.kappa);
        }
    }

    #[test]
    fn power_iteration_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = vp();
        for trial in 0..3 {
            let c1: f64 = rng.random_range(0.05..0.4);
            let c2: f64 = rng.random_range(-0.1..0.1);
            let m = PolyNoiseModel::scalar(&[(1, 0, c1), (2, 0, c2)]).unwrap();
            let grid = default_grid(&s, 39).unwrap();
            let basis = CarlemanBasis::new(1, 5).unwrap();
            let y0 = lift(&DVector::from_element(1, 0.2), &basis, grid.t[0]).unwrap();
            let q = assemble_dpm_qcms(&s, &m, &grid, 2, &basis).unwrap();
            let sys = assemble_global_dpm(&q, &y0).unwrap();
            assert_eq!(sys.dim(), 200);
            let dense = condition_number(&sys).unwrap();
            assert_eq!(dense.method, ConditionMethod::DenseSvd);
            let it = condition_number_with(&sys.mat, ConditionMethod::PowerIteration, Default::default()).unwrap();
            let rel = (it.kappa - dense.kappa).abs() / dense.kappa;
            assert!(rel < 0.01, "trial {trial}: {} vs {}", it.kappa, dense.kappa);

            let x = DVector::from_fn(200, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(200, |_, _| rng.random_range(-1.0..1.0));
            assert!(kappa_lower_bound(&sys.mat, &x, &y).unwrap() <= dense.kappa * (1.0 + 1e-12));
        }
    }

    #[test]
    fn kappa_permutation_invariant() {
        let (sys, _) = dpm_system(&presets::cubic(), 6, 2, 5);
        let base = condition_number(&sys).unwrap().kappa;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..sys.dim()).collect();
            perm.shuffle(&mut rng);
            let pm = sys.mat.permute_symmetric(&perm).unwrap();
            let k = condition_number_with(&pm, ConditionMethod::DenseSvd, Default::default()).unwrap().kappa;
            assert!((k - base).abs() <= 1e-6 * base);
        }
    }

    #[test]
    fn text_round_trip() {
        let (sys, _) = dpm_system(&presets::cubic(), 4, 2, 5);
        let text = export_text(&sys.mat);
        assert!(text.starts_with(&format!("{} {} {}\n", sys.dim(), sys.dim(), sys.mat.nnz())));
        assert_eq!(import_text(&text).unwrap(), sys.mat);
        assert!(import_text("2 2 1\n3 1 1.0\n").is_err());
        assert!(import_text("2 2 2\n1 1 1.0\n").is_err());
    }

    #[test]
    fn csv_row_format() {
        let r = condition_number_with(&CsrMatrix::identity(2), ConditionMethod::DenseSvd, Default::default())
            .unwrap();
        let meta = SystemMeta { scheme: "dpm".into(), d: 1, j: 2, n: 3, m: 0, p: 1 };
        let row = r.csv_row(&meta);
        assert_eq!(row.split(',').count(), ConditionReport::CSV_HEADER.split(',').count());
        assert!(row.starts_with("dpm,1,2,3,0,1,1.0000000000e0,dense_svd,1,1,2,2"));
    }
}
