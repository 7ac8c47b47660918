//! Carleman lifting of states and polynomial step maps into affine linear form.
//!
//! The lifted state is `Y = (x, x^{⊗2}, …, x^{⊗N})`. A polynomial step map `x ↦ P(x)` becomes
//! `Y ↦ Y + AY + b`, where block `j` of `(I + A)Y + b` holds the coefficients of `P(x)^{⊗j}`
//! with monomials of degree above `N` dropped.

use std::ops::{AddAssign, Range};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::model::{kron_vec, PolyNoiseModel, StepMap, KRON_MAX_DIM};
use crate::reference::{dpm_step_map, multistep_fractions, uni_weights, BVariant, Scheme};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::sparse::{CsrMatrix, Triplets};
use crate::{Error, Result};

/// Largest admissible lifted dimension.
pub const MAX_LIFTED_DIM: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarlemanMode {
    Scalar,
    Kron,
}

/// What to do when a step polynomial has degree above the truncation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TruncationPolicy {
    /// Refuse: block 1 must reproduce the step map exactly.
    #[default]
    Strict,
    /// Drop every monomial above `N`, block 1 included.
    Hard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanBasis {
    pub order: usize,
    pub dim: usize,
    pub mode: CarlemanMode,
    pub policy: TruncationPolicy,
    pub dim_total: usize,
    offsets: Vec<usize>,
}

impl CarlemanBasis {
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(Error::Domain("Carleman basis needs d >= 1 and N >= 1".into()));
        }
        if dim > KRON_MAX_DIM {
            return Err(Error::Capacity(format!("lifting supports d <= {KRON_MAX_DIM}, got {dim}")));
        }
        let mut offsets = vec![0usize];
        let mut len = 1usize;
        for _ in 1..=order {
            len = len
                .checked_mul(dim)
                .ok_or_else(|| Error::Capacity("lifted dimension overflow".into()))?;
            let next = offsets.last().unwrap() + len;
            if next > MAX_LIFTED_DIM {
                return Err(Error::Capacity(format!(
                    "lifted dimension exceeds {MAX_LIFTED_DIM} (d = {dim}, N = {order})"
                )));
            }
            offsets.push(next);
        }
        let mode = if dim == 1 { CarlemanMode::Scalar } else { CarlemanMode::Kron };
        Ok(Self {
            order,
            dim,
            mode,
            policy: TruncationPolicy::Strict,
            dim_total: *offsets.last().unwrap(),
            offsets,
        })
    }

    pub fn with_policy(mut self, policy: TruncationPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Flat positions of degree block `j` (1-based).
    pub fn block_range(&self, j: usize) -> Range<usize> {
        self.offsets[j - 1]..self.offsets[j]
    }

    pub fn block_len(&self, j: usize) -> usize {
        self.offsets[j] - self.offsets[j - 1]
    }

    /// Degree of the block holding flat position `pos`.
    pub fn degree_of(&self, pos: usize) -> usize {
        self.offsets.partition_point(|&o| o <= pos)
    }

    /// Flat position of the monomial `x_{i_1} ⋯ x_{i_j}` in Kronecker (graded-lex) order.
    pub fn index_of(&self, monomial: &[usize]) -> Result<usize> {
        let j = monomial.len();
        if j == 0 || j > self.order {
            return Err(Error::Domain(format!("monomial degree {j} outside 1..={}", self.order)));
        }
        let mut pos = 0usize;
        for &i in monomial {
            if i >= self.dim {
                return Err(Error::Domain(format!("coordinate {i} >= d = {}", self.dim)));
            }
            pos = pos * self.dim + i;
        }
        Ok(self.offsets[j - 1] + pos)
    }

    pub fn monomial_at(&self, pos: usize) -> Result<Vec<usize>> {
        if pos >= self.dim_total {
            return Err(Error::Domain(format!("position {pos} >= {}", self.dim_total)));
        }
        let j = self.degree_of(pos);
        let mut rem = pos - self.offsets[j - 1];
        let mut idx = vec![0; j];
        for slot in idx.iter_mut().rev() {
            *slot = rem % self.dim;
            rem /= self.dim;
        }
        Ok(idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    pub y: DVector<f64>,
    pub t: f64,
}

impl LiftedState {
    pub fn block(&self, basis: &CarlemanBasis, j: usize) -> DVector<f64> {
        let r = basis.block_range(j);
        self.y.rows(r.start, r.len()).into_owned()
    }
}

pub fn lift(x: &DVector<f64>, basis: &CarlemanBasis, t: f64) -> Result<LiftedState> {
    if x.len() != basis.dim {
        return Err(Error::DimensionMismatch { expected: basis.dim, got: x.len() });
    }
    let mut y = DVector::zeros(basis.dim_total);
    let mut p = x.clone();
    for j in 1..=basis.order {
        if j > 1 {
            p = kron_vec(&p, x);
        }
        y.rows_mut(basis.block_range(j).start, p.len()).copy_from(&p);
    }
    Ok(LiftedState { y, t })
}

/// `‖y_2 - y_1⊗y_1‖₂` (zero when N = 1).
pub fn consistency_defect(state: &LiftedState, basis: &CarlemanBasis) -> f64 {
    if basis.order < 2 {
        return 0.0;
    }
    let y1 = state.block(basis, 1);
    (state.block(basis, 2) - kron_vec(&y1, &y1)).norm()
}

fn kron_csr(a: &CsrMatrix, b: &CsrMatrix) -> CsrMatrix {
    let mut t = Triplets::new(a.nrows * b.nrows, a.ncols * b.ncols);
    for ra in 0..a.nrows {
        for (ca, va) in a.row(ra) {
            for rb in 0..b.nrows {
                for (cb, vb) in b.row(rb) {
                    t.push(ra * b.nrows + rb, ca * b.ncols + cb, va * vb);
                }
            }
        }
    }
    t.into_csr()
}

fn add_csr(a: Option<CsrMatrix>, b: CsrMatrix) -> CsrMatrix {
    match a {
        None => b,
        Some(a) => {
            let mut t = Triplets::new(a.nrows, a.ncols);
            t.push_csr(&a, 0, 0, 1.0);
            t.push_csr(&b, 0, 0, 1.0);
            t.into_csr()
        }
    }
}

/// Coefficients of `P(x)^{⊗m}` on `x^{⊗0..=N}`; entry `e` maps `x^{⊗e}` to the `d^m` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerBlocks {
    pub power: usize,
    pub blocks: Vec<Option<CsrMatrix>>,
}

impl PowerBlocks {
    /// Constant part (the degree-0 block) as a dense vector.
    pub fn constant(&self, rows: usize) -> DVector<f64> {
        match &self.blocks[0] {
            Some(c) => DVector::from_iterator(rows, (0..rows).map(|r| c.get(r, 0))),
            None => DVector::zeros(rows),
        }
    }
}

/// Expands the `m`-th Kronecker power of a step map, dropping monomials above `N`.
pub fn compose_poly_power(p: &StepMap, m: usize, basis: &CarlemanBasis) -> Result<PowerBlocks> {
    if m == 0 || m > basis.order {
        return Err(Error::Domain(format!("power {m} outside 1..={}", basis.order)));
    }
    if p.dim != basis.dim {
        return Err(Error::DimensionMismatch { expected: basis.dim, got: p.dim });
    }
    let n = basis.order;
    let pe: Vec<Option<CsrMatrix>> = (0..=n)
        .map(|e| {
            p.terms
                .get(e)
                .map(CsrMatrix::from_dense)
                .filter(|c| c.nnz() > 0)
        })
        .collect();
    let mut cur = pe.clone();
    for _ in 1..m {
        let mut next: Vec<Option<CsrMatrix>> = vec![None; n + 1];
        for (e1, q) in cur.iter().enumerate() {
            let Some(q) = q else { continue };
            for (e2, pm) in pe.iter().enumerate() {
                if e1 + e2 > n {
                    break;
                }
                let Some(pm) = pm else { continue };
                let prod = kron_csr(q, pm);
                next[e1 + e2] = Some(add_csr(next[e1 + e2].take(), prod));
            }
        }
        cur = next;
    }
    Ok(PowerBlocks { power: m, blocks: cur })
}

fn check_degree(map: &StepMap, basis: &CarlemanBasis) -> Result<()> {
    let deg = map.degree();
    if basis.policy == TruncationPolicy::Strict && deg > basis.order {
        return Err(Error::DegreeExceedsTruncation { degree: deg, order: basis.order });
    }
    Ok(())
}

/// Transfer rows `(Tr, b)` of blocks `from..=N` for a step map: block j of `T·Y + b` ≈ `P(x)^{⊗j}`.
fn transfer_rows(
    map: &StepMap,
    basis: &CarlemanBasis,
    blocks: Range<usize>,
    t: &mut Triplets,
    b: &mut DVector<f64>,
) -> Result<()> {
    for j in blocks {
        let pw = compose_poly_power(map, j, basis)?;
        let r0 = basis.block_range(j).start;
        let rows = basis.block_len(j);
        b.rows_mut(r0, rows).add_assign(&pw.constant(rows));
        for e in 1..=basis.order {
            if let Some(blk) = &pw.blocks[e] {
                t.push_csr(blk, r0, basis.block_range(e).start, 1.0);
            }
        }
    }
    Ok(())
}


/// One step's Carleman matrix: `Y_i = Y_{i-1} + A·Y_{i-1} + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qcm {
    pub a: CsrMatrix,
    pub b: DVector<f64>,
    pub step: usize,
    pub scheme: Scheme,
    pub node: usize,
    /// Degree of the step polynomial.
    pub step_degree: usize,
}

impl Qcm {
    /// Checks that block (j, e) of A is nonzero only when `e ≤ j·J_step` or `e = j`.
    pub fn check_structure(&self, basis: &CarlemanBasis) -> Result<()> {
        for r in 0..self.a.nrows {
            let j = basis.degree_of(r);
            for (c, _) in self.a.row(r) {
                let e = basis.degree_of(c);
                if e != j && e > j * self.step_degree {
                    return Err(Error::Structure(format!(
                        "entry ({r}, {c}) maps degree {e} into degree {j} with step degree {}",
                        self.step_degree
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Lifts a step map `x ↦ P(x)` into `A = T - I`, `b`.
pub fn qcm_from_map(map: &StepMap, basis: &CarlemanBasis, step: usize, scheme: Scheme) -> Result<Qcm> {
    check_degree(map, basis)?;
    let n = basis.dim_total;
    let mut t = Triplets::new(n, n);
    let mut b = DVector::zeros(n);
    transfer_rows(map, basis, 1..basis.order + 1, &mut t, &mut b)?;
    for r in 0..n {
        t.push(r, r, -1.0);
    }
    Ok(Qcm { a: t.into_csr(), b, step, scheme, node: 0, step_degree: map.degree() })
}

/// QCM of DPM-solver-k step `i` (node i-1 → i).
pub fn assemble_dpm_qcm(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    i: usize,
    grid: &TimeGrid,
    k: usize,
    basis: &CarlemanBasis,
) -> Result<Qcm> {
    if i == 0 || i >= grid.len() {
        return Err(Error::Domain(format!("step index {i} outside 1..={}", grid.steps())));
    }
    let map = dpm_step_map(s, m, grid.lam[i - 1], grid.lam[i], k)?;
    qcm_from_map(&map, basis, i, Scheme::Dpm(k))
}

pub fn step_lifted(q: &Qcm, y: &LiftedState, t: f64) -> Result<LiftedState> {
    let ay = q.a.mul_vec(&y.y)?;
    if q.b.len() != y.y.len() {
        return Err(Error::DimensionMismatch { expected: y.y.len(), got: q.b.len() });
    }
    Ok(LiftedState { y: &y.y + ay + &q.b, t })
}

/// Per-node matrix of a multistep iteration; multiplies the state at `grid_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeQcm {
    pub node: usize,
    pub grid_index: usize,
    pub a: CsrMatrix,
    pub b: DVector<f64>,
}

/// Corrector iteration `z_i - z_{i-1} = B·z_{i-1} + Σ_m A_c^{(m)} Y_{node m} + b_c`, with `B = b_scale·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorQcm {
    pub b_scale: f64,
    pub nodes: Vec<NodeQcm>,
}

/// UniPC step `i` in lifted form.
///
/// Predictor: `Y_i - Y_{i-1} = Σ_m A^{(m)} Y_{node m} + b^{(m)}`, plus `z_coupling·z_{i-1}` on
/// block 1 when a corrector is present.
#[derive(Debug, Clone, PartialEq)]
pub struct UniPcQcm {
    pub step: usize,
    pub order: usize,
    pub warmup: bool,
    pub predictor: Vec<NodeQcm>,
    pub z_coupling: Option<f64>,
    pub corrector: Option<CorrectorQcm>,
}

fn block1_rows(map: &StepMap, basis: &CarlemanBasis) -> Result<(CsrMatrix, DVector<f64>)> {
    let n = basis.dim_total;
    let mut t = Triplets::new(n, n);
    let mut b = DVector::zeros(n);
    transfer_rows(map, basis, 1..2, &mut t, &mut b)?;
    Ok((t.into_csr(), b))
}

/// Assembles lifted UniPC step `i` (multistep nodes at earlier grid points).
#[allow(clippy::too_many_arguments)]
pub fn assemble_unipc_qcms(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    i: usize,
    grid: &TimeGrid,
    p: usize,
    bh: BVariant,
    correct: bool,
    basis: &CarlemanBasis,
) -> Result<UniPcQcm> {
    if !(1..=3).contains(&p) {
        return Err(Error::Domain(format!("UniPC order must be 1..=3, got {p}")));
    }
    if i == 0 || i >= grid.len() {
        return Err(Error::Domain(format!("step index {i} outside 1..={}", grid.steps())));
    }
    let n = basis.dim_total;
    let d = basis.dim;
    let (l0, l1) = (grid.lam[i - 1], grid.lam[i]);
    let dpm = dpm_step_map(s, m, l0, l1, p)?;

    if i < p {
        // warm-up: DPM-p on every block; the corrected state copies block 1
        check_degree(&dpm, basis)?;
        let q = qcm_from_map(&dpm, basis, i, Scheme::Dpm(p))?;
        let corrector = correct.then(|| {
            let mut sel = Triplets::new(d, n);
            for r in 0..d {
                sel.push(r, r, 1.0);
            }
            CorrectorQcm {
                b_scale: -1.0,
                nodes: vec![NodeQcm { node: p, grid_index: i, a: sel.into_csr(), b: DVector::zeros(d) }],
            }
        });
        return Ok(UniPcQcm {
            step: i,
            order: p,
            warmup: true,
            predictor: vec![NodeQcm { node: 0, grid_index: i - 1, a: q.a, b: q.b }],
            z_coupling: None,
            corrector,
        });
    }

    let kron = m.to_kron()?;
    let r = multistep_fractions(grid, i, p - 1)?;
    let w = uni_weights(s, l0, l1, &r, bh)?;
    let node_lam = |mm: usize| grid.lam[i - 1 - mm];

    // node maps: node 0 carries the identity part unless it is supplied by z
    let mut node_maps = Vec::with_capacity(p);
    for mm in 0..p {
        let mut map = StepMap::zero(d);
        if mm == 0 && !correct {
            map.add_identity(w.ratio);
        }
        map.add_poly(&kron, node_lam(mm), w.w[mm])?;
        check_degree(&map, basis)?;
        node_maps.push(map);
    }

    let mut predictor = Vec::with_capacity(p);
    let mut b_total = DVector::zeros(n);
    for (mm, map) in node_maps.iter().enumerate() {
        let (a, b) = block1_rows(map, basis)?;
        b_total += b;
        predictor.push(NodeQcm { node: mm, grid_index: i - 1 - mm, a, b: DVector::zeros(n) });
    }
    // higher blocks from the DPM-p powers of node 0, and -I everywhere on node 0
    {
        let mut t = Triplets::new(n, n);
        t.push_csr(&predictor[0].a, 0, 0, 1.0);
        transfer_rows(&dpm, basis, 2..basis.order + 1, &mut t, &mut b_total)?;
        for r0 in 0..n {
            t.push(r0, r0, -1.0);
        }
        predictor[0].a = t.into_csr();
        predictor[0].b = b_total;
    }

    let corrector = if correct {
        let mut rc = r.clone();
        rc.push(1.0);
        let wc = uni_weights(s, l0, l1, &rc, bh)?;
        let mut nodes = Vec::with_capacity(p + 1);
        let mut bc = DVector::zeros(d);
        for mm in 0..=p {
            let (gi, lam) = if mm == p { (i, l1) } else { (i - 1 - mm, node_lam(mm)) };
            let mut map = StepMap::zero(d);
            map.add_poly(&kron, lam, wc.w[mm])?;
            check_degree(&map, basis)?;
            let mut t = Triplets::new(d, n);
            for (e, c) in map.terms.iter().enumerate() {
                if e == 0 {
                    bc += c.column(0);
                } else if e <= basis.order {
                    t.push_csr(&CsrMatrix::from_dense(c), 0, basis.block_range(e).start, 1.0);
                }
            }
            nodes.push(NodeQcm { node: mm, grid_index: gi, a: t.into_csr(), b: DVector::zeros(d) });
        }
        nodes[0].b = bc;
        Some(CorrectorQcm { b_scale: wc.ratio - 1.0, nodes })
    } else {
        None
    };

    Ok(UniPcQcm {
        step: i,
        order: p,
        warmup: false,
        predictor,
        z_coupling: correct.then_some(w.ratio),
        corrector,
    })
}

/// Applies a lifted UniPC step given all earlier lifted states `ys` and corrected states `zs`.
pub fn step_lifted_unipc(
    q: &UniPcQcm,
    ys: &[LiftedState],
    zs: &[DVector<f64>],
    basis: &CarlemanBasis,
    t: f64,
) -> Result<(LiftedState, Option<DVector<f64>>)> {
    let i = q.step;
    let get = |gi: usize| -> Result<&LiftedState> {
        ys.get(gi).ok_or(Error::MissingHistory { step: i, needed: gi + 1, available: ys.len() })
    };
    let prev = get(i - 1)?;
    let mut y = prev.y.clone();
    for nq in &q.predictor {
        y += nq.a.mul_vec(&get(nq.grid_index)?.y)? + &nq.b;
    }
    if let Some(c) = q.z_coupling {
        let z = zs.get(i - 1).ok_or(Error::MissingHistory { step: i, needed: i, available: zs.len() })?;
        let mut blk = y.rows_mut(basis.block_range(1).start, basis.dim);
        blk += z * c;
    }
    let yi = LiftedState { y, t };
    let z = match &q.corrector {
        None => None,
        Some(cq) => {
            let zp = zs.get(i - 1).ok_or(Error::MissingHistory { step: i, needed: i, available: zs.len() })?;
            Some(apply_corrector(cq, i, ys, &yi, zp)?)
        }
    };
    Ok((yi, z))
}

/// Corrector update of step `i`; `yi` is the lifted predictor state at node i.
pub fn apply_corrector(
    cq: &CorrectorQcm,
    i: usize,
    ys: &[LiftedState],
    yi: &LiftedState,
    z_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut z = z_prev * (1.0 + cq.b_scale);
    for nq in &cq.nodes {
        let src = if nq.grid_index == i {
            yi
        } else {
            ys.get(nq.grid_index)
                .ok_or(Error::MissingHistory { step: i, needed: nq.grid_index + 1, available: ys.len() })?
        };
        z += nq.a.mul_vec(&src.y)? + &nq.b;
    }
    Ok(z)
}

/// Lifted trajectory; `corrected` holds the corrector states for predictor-corrector runs.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedRun {
    pub states: Vec<LiftedState>,
    pub corrected: Option<Vec<DVector<f64>>>,
}

impl LiftedRun {
    /// Block-1 output trajectory (corrected states when present).
    pub fn block1(&self, basis: &CarlemanBasis) -> Vec<DVector<f64>> {
        match &self.corrected {
            Some(z) => z.clone(),
            None => self.states.iter().map(|y| y.block(basis, 1)).collect(),
        }
    }
}

/// Assembles every DPM-solver-k QCM on the grid (steps in parallel).
pub fn assemble_dpm_qcms(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    grid: &TimeGrid,
    k: usize,
    basis: &CarlemanBasis,
) -> Result<Vec<Qcm>> {
    (1..grid.len())
        .into_par_iter()
        .map(|i| assemble_dpm_qcm(s, m, i, grid, k, basis))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn assemble_all_unipc_qcms(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    grid: &TimeGrid,
    p: usize,
    bh: BVariant,
    correct: bool,
    basis: &CarlemanBasis,
) -> Result<Vec<UniPcQcm>> {
    (1..grid.len())
        .into_par_iter()
        .map(|i| assemble_unipc_qcms(s, m, i, grid, p, bh, correct, basis))
        .collect()
}

/// Sequential lifted DPM run from `lift(x_T)`.
pub fn run_lifted_dpm(qcms: &[Qcm], y0: &LiftedState, grid: &TimeGrid) -> Result<LiftedRun> {
    let mut states = vec![y0.clone()];
    for (idx, q) in qcms.iter().enumerate() {
        let next = step_lifted(q, &states[idx], grid.t[idx + 1])?;
        states.push(next);
    }
    Ok(LiftedRun { states, corrected: None })
}

/// Sequential lifted UniPC run; `z0` must be given iff the QCMs carry a corrector.
pub fn run_lifted_unipc(
    qcms: &[UniPcQcm],
    y0: &LiftedState,
    z0: Option<&DVector<f64>>,
    basis: &CarlemanBasis,
    grid: &TimeGrid,
) -> Result<LiftedRun> {
    let mut states = vec![y0.clone()];
    let mut zs: Vec<DVector<f64>> = z0.into_iter().cloned().collect();
    for (idx, q) in qcms.iter().enumerate() {
        let (y, z) = step_lifted_unipc(q, &states, &zs, basis, grid.t[idx + 1])?;
        states.push(y);
        if let Some(z) = z {
            zs.push(z);
        }
    }
    let corrected = z0.is_some().then_some(zs);
    Ok(LiftedRun { states, corrected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::reference::{dpm_step, run_dpm, run_unip, run_unipc, UniOptions};
    use crate::schedule::default_grid;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::vp(0.1, 20.0, 1.0).unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn scalar_map(c: &[f64]) -> StepMap {
        StepMap { dim: 1, terms: c.iter().map(|&v| nalgebra::DMatrix::from_element(1, 1, v)).collect() }
    }

    #[test]
    fn basis_index_round_trip() {
        let b = CarlemanBasis::new(3, 3).unwrap();
        assert_eq!(b.dim_total, 3 + 9 + 27);
        for pos in 0..b.dim_total {
            let mono = b.monomial_at(pos).unwrap();
            assert_eq!(b.index_of(&mono).unwrap(), pos);
        }
        assert_eq!(b.index_of(&[2, 0]).unwrap(), 3 + 6);
        assert!(b.index_of(&[3]).is_err());
    }

    #[test]
    fn lift_examples() {
        let b = CarlemanBasis::new(1, 3).unwrap();
        assert_eq!(lift(&v1(2.0), &b, 0.0).unwrap().y.as_slice(), &[2.0, 4.0, 8.0]);
        let b = CarlemanBasis::new(2, 2).unwrap();
        let y = lift(&DVector::from_vec(vec![1.0, 0.0]), &b, 0.0).unwrap();
        assert_eq!(y.y.as_slice(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let b = CarlemanBasis::new(3, 4).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.1, 0.7]);
        let y = lift(&x, &b, 0.0).unwrap();
        let y2 = y.block(&b, 2);
        assert!((y.block(&b, 4) - kron_vec(&y2, &y2)).norm() < 1e-12);
        assert_eq!(consistency_defect(&y, &b), 0.0);
    }

    #[test]
    fn compose_examples() {
        let b = CarlemanBasis::new(1, 5).unwrap();
        let pw = compose_poly_power(&scalar_map(&[0.0, 1.0]), 5, &b).unwrap();
        for e in 0..5 {
            assert!(pw.blocks[e].is_none());
        }
        assert_eq!(pw.blocks[5].as_ref().unwrap().get(0, 0), 1.0);

        let pw = compose_poly_power(&scalar_map(&[2.0]), 3, &b).unwrap();
        assert_eq!(pw.constant(1)[0], 8.0);
        assert!(pw.blocks[1..].iter().all(|b| b.is_none()));

        // (1 + x + x²)² = 1 + 2x + 3x² + 2x³ + x⁴, x⁴ dropped at N = 3
        let b3 = CarlemanBasis::new(1, 3).unwrap();
        let pw = compose_poly_power(&scalar_map(&[1.0, 1.0, 1.0]), 2, &b3).unwrap();
        let got: Vec<f64> = (0..=3).map(|e| pw.blocks[e].as_ref().map_or(0.0, |m| m.get(0, 0))).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0, 2.0]);
        assert!(compose_poly_power(&scalar_map(&[1.0]), 4, &b3).is_err());
    }

    #[test]
    fn zero_model_qcm_is_diagonal_rescaling() {
        let s = vp();
        let g = default_grid(&s, 4).unwrap();
        let b = CarlemanBasis::new(2, 3).unwrap();
        let q = assemble_dpm_qcm(&s, &presets::zero(2).unwrap(), 2, &g, 2, &b).unwrap();
        let ratio = s.alpha(g.t[2]) / s.alpha(g.t[1]);
        assert_eq!(q.b.norm(), 0.0);
        for r in 0..b.dim_total {
            let j = b.degree_of(r);
            assert_eq!(q.a.row_nnz(r), 1);
            let want = ratio.powi(j as i32) - 1.0;
            assert!((q.a.get(r, r) - want).abs() < 1e-14 * want.abs());
        }
    }

    #[test]
    fn linear_model_is_exact_and_lower_triangular() {
        let s = vp();
        let m = presets::linear();
        let g = default_grid(&s, 16).unwrap();
        let x = v1(0.01);
        let reference = run_dpm(&s, &m, &x, &g, 1).unwrap();
        for n in [1, 2, 4] {
            let b = CarlemanBasis::new(1, n).unwrap();
            let qcms = assemble_dpm_qcms(&s, &m, &g, 1, &b).unwrap();
            for q in &qcms {
                q.check_structure(&b).unwrap();
                for r in 0..q.a.nrows {
                    assert!(q.a.row(r).all(|(c, _)| c <= r));
                }
            }
            let run = run_lifted_dpm(&qcms, &lift(&x, &b, 1.0).unwrap(), &g).unwrap();
            for (y, st) in run.states.iter().zip(&reference.states) {
                assert!((y.y[0] - st.x[0]).abs() <= 1e-12 * st.x[0].abs().max(1e-300));
                let want = lift(&st.x, &b, st.t).unwrap();
                assert!((&y.y - &want.y).norm() <= 1e-12 * want.y.norm());
            }
        }
    }

    #[test]
    fn one_step_block_exactness() {
        let s = vp();
        let m = presets::weak_quadratic();
        let g = default_grid(&s, 8).unwrap();
        let b = CarlemanBasis::new(1, 4).unwrap();
        let q = assemble_dpm_qcm(&s, &m, 3, &g, 1, &b).unwrap();
        q.check_structure(&b).unwrap();
        let x = v1(0.3);
        let y = step_lifted(&q, &lift(&x, &b, g.t[2]).unwrap(), g.t[3]).unwrap();
        let want = dpm_step(&s, &m, &x, 3, &g, 1).unwrap()[0];
        assert!((y.y[0] - want).abs() < 1e-14);
        // j·J_step ≤ N for j = 2
        assert!((y.y[1] - want * want).abs() < 1e-14);
    }

    #[test]
    fn strict_policy_rejects_high_degree() {
        let s = vp();
        let g = default_grid(&s, 4).unwrap();
        let b = CarlemanBasis::new(1, 1).unwrap();
        let err = assemble_dpm_qcm(&s, &presets::weak_quadratic(), 1, &g, 1, &b).unwrap_err();
        assert_eq!(err, Error::DegreeExceedsTruncation { degree: 2, order: 1 });
        let b = b.with_policy(TruncationPolicy::Hard);
        assert!(assemble_dpm_qcm(&s, &presets::weak_quadratic(), 1, &g, 1, &b).is_ok());
    }

    #[test]
    fn identity_step_leaves_state() {
        let b = CarlemanBasis::new(2, 2).unwrap();
        let q = Qcm {
            a: CsrMatrix::zeros(6, 6),
            b: DVector::zeros(6),
            step: 1,
            scheme: Scheme::Dpm(1),
            node: 0,
            step_degree: 1,
        };
        let y = lift(&DVector::from_vec(vec![0.2, 0.4]), &b, 0.0).unwrap();
        assert_eq!(step_lifted(&q, &y, 0.0).unwrap().y, y.y);
    }

    #[test]
    fn unip1_lifted_matches_dpm1_lifted() {
        let s = vp();
        let m = presets::weak_quadratic();
        let g = default_grid(&s, 8).unwrap();
        let b = CarlemanBasis::new(1, 4).unwrap();
        for i in 1..=8 {
            let d = assemble_dpm_qcm(&s, &m, i, &g, 1, &b).unwrap();
            let u = assemble_unipc_qcms(&s, &m, i, &g, 1, BVariant::Bh2, false, &b).unwrap();
            assert_eq!(u.predictor.len(), 1);
            assert!((u.predictor[0].a.to_dense() - d.a.to_dense()).norm() < 1e-15);
            assert!((&u.predictor[0].b - &d.b).norm() < 1e-15);
        }
    }

    #[test]
    fn unipc_block1_one_step_matches_reference() {
        let s = vp();
        let m = presets::weak_quadratic();
        let g = default_grid(&s, 8).unwrap();
        let b = CarlemanBasis::new(1, 4).unwrap();
        let x = v1(0.01);
        let opts = UniOptions::default();
        for correct in [false, true] {
            let qcms = assemble_all_unipc_qcms(&s, &m, &g, 2, BVariant::Bh2, correct, &b).unwrap();
            let reference = if correct {
                run_unipc(&s, &m, &x, &g, 2, &opts).unwrap()
            } else {
                run_unip(&s, &m, &x, &g, 2, &opts).unwrap()
            };
            // restart the lifted iteration from lifted reference states at every step
            let mut ys: Vec<LiftedState> = Vec::new();
            let pred = reference.predictor.clone();
            for (j, st) in reference.states.iter().enumerate() {
                let src = pred.as_ref().map_or(&st.x, |p| &p[j]);
                ys.push(lift(src, &b, st.t).unwrap());
            }
            let zs: Vec<DVector<f64>> = reference.states.iter().map(|p| p.x.clone()).collect();
            for q in &qcms {
                let (y, z) = step_lifted_unipc(q, &ys[..q.step], &zs[..q.step], &b, g.t[q.step]).unwrap();
                let i = q.step;
                let want_pred = pred.as_ref().map_or(&reference.states[i].x, |p| &p[i]);
                assert!((y.y[0] - want_pred[0]).abs() < 1e-12 * want_pred[0].abs(), "step {i} correct={correct}: {} vs {}", y.y[0], want_pred[0]);
                if correct {
                    assert!(z.is_some());
                    // exact when the predictor state enters the corrector consistently lifted
                    let z = apply_corrector(q.corrector.as_ref().unwrap(), i, &ys, &ys[i], &zs[i - 1]).unwrap();
                    assert!((z[0] - reference.states[i].x[0]).abs() < 1e-12 * z[0].abs(), "step {i}");
                }
            }
        }
    }

    #[test]
    fn constant_model_has_no_history_matrices() {
        let s = vp();
        let m = PolyNoiseModel::scalar(&[(0, 0, 0.3)]).unwrap();
        let g = default_grid(&s, 6).unwrap();
        let b = CarlemanBasis::new(1, 3).unwrap();
        let q = assemble_unipc_qcms(&s, &m, 4, &g, 3, BVariant::Bh2, true, &b).unwrap();
        for nq in &q.predictor[1..] {
            assert_eq!(nq.a.nnz(), 0);
            assert_eq!(nq.b.norm(), 0.0);
        }
    }
}
