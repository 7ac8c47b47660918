//! Nonlinear reference solvers: RK4 oracle, DPM-solver-k and UniPC-p.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::model::{derivative_tower, drift, PolyNoiseModel, StepMap, TrajectoryPoint};
use crate::schedule::{default_grid, phi_moment, taylor_integral, NoiseSchedule, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Oracle { substeps: usize },
    Dpm(usize),
    UniP(usize),
    UniPc(usize),
}

impl Scheme {
    pub fn order(&self) -> usize {
        match *self {
            Scheme::Oracle { .. } => 4,
            Scheme::Dpm(k) | Scheme::UniP(k) | Scheme::UniPc(k) => k,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Oracle { .. } => write!(f, "oracle"),
            Scheme::Dpm(k) => write!(f, "dpm_{k}"),
            Scheme::UniP(p) => write!(f, "unip_{p}"),
            Scheme::UniPc(p) => write!(f, "unic_{p}"),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    /// Parses `oracle`, `dpm_k`, `unip_p` or `unic_p`.
    fn from_str(tag: &str) -> Result<Self> {
        if tag == "oracle" {
            return Ok(Scheme::Oracle { substeps: DEFAULT_ORACLE_SUBSTEPS });
        }
        let bad = || Error::Parse(format!("unknown scheme {tag:?}; expected oracle, dpm_k, unip_p or unic_p"));
        let (name, order) = tag.rsplit_once('_').ok_or_else(bad)?;
        let order: usize = order.parse().map_err(|_| bad())?;
        if !(1..=3).contains(&order) {
            return Err(Error::Domain(format!("order must be 1..=3, got {order}")));
        }
        match name {
            "dpm" => Ok(Scheme::Dpm(order)),
            "unip" => Ok(Scheme::UniP(order)),
            "unic" | "unipc" => Ok(Scheme::UniPc(order)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverRun {
    pub grid: TimeGrid,
    pub states: Vec<TrajectoryPoint>,
    pub nfe: usize,
    pub scheme: Scheme,
    /// Predictor outputs per node for predictor-corrector runs.
    pub predictor: Option<Vec<DVector<f64>>>,
}

impl SolverRun {
    pub fn endpoint(&self) -> &DVector<f64> {
        &self.states.last().expect("runs have at least one state").x
    }

    fn new(grid: &TimeGrid, xs: Vec<DVector<f64>>, nfe: usize, scheme: Scheme) -> Self {
        let states = xs
            .into_iter()
            .zip(grid.t.iter().zip(&grid.lam))
            .map(|(x, (&t, &lam))| TrajectoryPoint { t, lam, x })
            .collect();
        Self { grid: grid.clone(), states, nfe, scheme, predictor: None }
    }
}

fn check_start(m: &PolyNoiseModel, x: &DVector<f64>) -> Result<()> {
    if x.len() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), got: x.len() });
    }
    Ok(())
}

/// Classic RK4 in t with `substeps` sub-intervals per grid interval, sub-nodes uniform in λ.
pub fn rk4_on_grid(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<SolverRun> {
    check_start(m, x_t)?;
    if substeps == 0 {
        return Err(Error::Domain("substeps must be >= 1".into()));
    }
    let mut x = x_t.clone();
    let mut xs = vec![x.clone()];
    let mut nfe = 0;
    for i in 1..grid.len() {
        let mut t0 = grid.t[i - 1];
        for q in 1..=substeps {
            let t1 = if q == substeps {
                grid.t[i]
            } else {
                s.time_of_lambda(grid.lam[i - 1] + grid.h[i - 1] * q as f64 / substeps as f64)?
            };
            let dt = t1 - t0;
            if !(dt.abs() > 1e-15 * t0.abs()) {
                return Err(Error::Domain(format!("step-size underflow at t = {t0:e}")));
            }
            let k1 = drift(s, m, &x, t0)?;
            let k2 = drift(s, m, &(&x + &k1 * (0.5 * dt)), t0 + 0.5 * dt)?;
            let k3 = drift(s, m, &(&x + &k2 * (0.5 * dt)), t0 + 0.5 * dt)?;
            let k4 = drift(s, m, &(&x + &k3 * dt), t1)?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            nfe += 4;
            t0 = t1;
        }
        xs.push(x.clone());
    }
    Ok(SolverRun::new(grid, xs, nfe, Scheme::Oracle { substeps: substeps * grid.steps() }))
}

/// Substep count used when an oracle endpoint is needed.
pub const DEFAULT_ORACLE_SUBSTEPS: usize = 4000;

/// RK4 from T down to the time floor on a λ-uniform grid with `substeps` steps.
pub fn rk4_oracle(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    substeps: usize,
) -> Result<SolverRun> {
    let grid = default_grid(s, substeps)?;
    rk4_on_grid(s, m, x_t, &grid, 1)
}

/// Closed-form solution for the scalar linear model ε = c·x, at log-SNR `lam`.
pub fn linear_closed_form(s: &NoiseSchedule, c: f64, x_start: f64, lam_start: f64, lam: f64) -> f64 {
    let ratio = s.alpha_of_lambda(lam) / s.alpha_of_lambda(lam_start);
    x_start * ratio * (c * ((-lam).exp().asinh() - (-lam_start).exp().asinh())).exp()
}

fn check_dpm_order(k: usize) -> Result<()> {
    if !(1..=3).contains(&k) {
        return Err(Error::Domain(format!("DPM-solver order must be 1..=3, got {k}")));
    }
    Ok(())
}

/// One DPM-solver-k step from `lam_s` to `lam_t`.
pub fn dpm_step_between(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x: &DVector<f64>,
    lam_s: f64,
    lam_t: f64,
    k: usize,
) -> Result<DVector<f64>> {
    check_dpm_order(k)?;
    check_start(m, x)?;
    let a_s = s.alpha_of_lambda(lam_s);
    let a_t = s.alpha_of_lambda(lam_t);
    let mut out = x * (a_t / a_s);
    for (n, dn) in derivative_tower(s, m, k, lam_s)?.iter().enumerate() {
        let w = a_t * taylor_integral(n, lam_s, lam_t)?;
        out -= dn.eval_eps(x, lam_s)? * w;
    }
    Ok(out)
}

/// Step `i` (node i-1 → i) of DPM-solver-k on `grid`.
pub fn dpm_step(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x: &DVector<f64>,
    i: usize,
    grid: &TimeGrid,
    k: usize,
) -> Result<DVector<f64>> {
    if i == 0 || i >= grid.len() {
        return Err(Error::Domain(format!("step index {i} outside 1..={}", grid.steps())));
    }
    dpm_step_between(s, m, x, grid.lam[i - 1], grid.lam[i], k)
}

/// DPM-solver-k step as a frozen polynomial map (Kronecker form).
pub fn dpm_step_map(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    lam_s: f64,
    lam_t: f64,
    k: usize,
) -> Result<StepMap> {
    check_dpm_order(k)?;
    let a_s = s.alpha_of_lambda(lam_s);
    let a_t = s.alpha_of_lambda(lam_t);
    let mut map = StepMap::zero(m.dim());
    map.add_identity(a_t / a_s);
    for (n, dn) in derivative_tower(s, m, k, lam_s)?.iter().enumerate() {
        let w = a_t * taylor_integral(n, lam_s, lam_t)?;
        map.add_poly(&dn.to_kron()?, lam_s, -w)?;
    }
    Ok(map)
}

pub fn run_dpm(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    k: usize,
) -> Result<SolverRun> {
    check_dpm_order(k)?;
    check_start(m, x_t)?;
    let mut xs = vec![x_t.clone()];
    for i in 1..grid.len() {
        let next = dpm_step(s, m, &xs[i - 1], i, grid, k)?;
        xs.push(next);
    }
    Ok(SolverRun::new(grid, xs, k * grid.steps(), Scheme::Dpm(k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BVariant {
    /// B(h) = h
    Bh1,
    /// B(h) = e^h - 1
    #[default]
    Bh2,
}

impl BVariant {
    pub fn eval(self, h: f64) -> f64 {
        match self {
            BVariant::Bh1 => h,
            BVariant::Bh2 => h.exp_m1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum UniMode {
    /// Nodes are earlier grid points; history is reused across steps.
    #[default]
    Multistep,
    /// Fresh interior nodes at fractions `r` (default m/p) inside each step.
    SingleStep { r: Option<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UniOptions {
    pub bh: BVariant,
    pub mode: UniMode,
}

/// Weights `a` and `B(h)` from the order conditions `Σ_m a_m r_m^{n-1} = n!·hφ_{n+1}(h)/B(h)`.
pub fn uni_coeffs(r: &[f64], h: f64, bh: BVariant) -> Result<(Vec<f64>, f64)> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    let b = bh.eval(h);
    let k = r.len();
    for (i, &ri) in r.iter().enumerate() {
        if ri == 0.0 || !ri.is_finite() || r[..i].iter().any(|&rj| (rj - ri).abs() <= 1e-12) {
            return Err(Error::SingularVandermonde);
        }
    }
    if k == 0 {
        return Ok((Vec::new(), b));
    }
    let mut v = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    let mut fact = 1.0;
    for n in 1..=k {
        fact *= n as f64;
        for (mi, &rm) in r.iter().enumerate() {
            v[(n - 1, mi)] = rm.powi(n as i32 - 1);
        }
        rhs[n - 1] = fact * phi_moment(n, h) / (h.powi(n as i32) * b);
    }
    let a = v.lu().solve(&rhs).ok_or(Error::SingularVandermonde)?;
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularVandermonde);
    }
    Ok((a.iter().copied().collect(), b))
}

/// Interpolation data of one UniPC update.
#[derive(Debug, Clone, PartialEq)]
pub struct UniStepContext {
    pub r: Vec<f64>,
    /// `s_m = λ_{s_0} + r_m h`.
    pub s_lam: Vec<f64>,
    pub a: Vec<f64>,
    pub bh: f64,
    pub h: f64,
    pub lam0: f64,
    pub lam_target: f64,
    pub eps0: DVector<f64>,
    pub d: Vec<DVector<f64>>,
}

impl UniStepContext {
    /// `eps_nodes[m-1]` is ε at node `s_m`; `D_m = eps_nodes[m-1] - eps0`.
    pub fn new(
        lam0: f64,
        lam_target: f64,
        r: Vec<f64>,
        bh: BVariant,
        eps0: DVector<f64>,
        eps_nodes: &[DVector<f64>],
    ) -> Result<Self> {
        if eps_nodes.len() != r.len() {
            return Err(Error::DimensionMismatch { expected: r.len(), got: eps_nodes.len() });
        }
        let h = lam_target - lam0;
        let (a, b) = uni_coeffs(&r, h, bh)?;
        let s_lam = r.iter().map(|&rm| lam0 + rm * h).collect();
        let d = eps_nodes.iter().map(|e| e - &eps0).collect();
        Ok(Self { r, s_lam, a, bh: b, h, lam0, lam_target, eps0, d })
    }
}

/// `(α_{s_p}/α_{s_0})·base - σ_{s_p}(e^h-1)ε_0 - σ_{s_p}B(h)Σ_m (a_m/r_m) D_m`.
fn uni_update(s: &NoiseSchedule, ctx: &UniStepContext, base: &DVector<f64>) -> Result<DVector<f64>> {
    if base.len() != ctx.eps0.len() {
        return Err(Error::DimensionMismatch { expected: ctx.eps0.len(), got: base.len() });
    }
    let sig = s.sigma_of_lambda(ctx.lam_target);
    let ratio = s.alpha_of_lambda(ctx.lam_target) / s.alpha_of_lambda(ctx.lam0);
    let mut out = base * ratio - &ctx.eps0 * (sig * ctx.h.exp_m1());
    let mut acc = DVector::zeros(base.len());
    for ((am, rm), dm) in ctx.a.iter().zip(&ctx.r).zip(&ctx.d) {
        acc += dm * (am / rm);
    }
    out -= acc * (sig * ctx.bh);
    Ok(out)
}

/// UniP-p predictor update from the state at `s_0`.
pub fn unip_step(s: &NoiseSchedule, ctx: &UniStepContext, x_s0: &DVector<f64>) -> Result<DVector<f64>> {
    uni_update(s, ctx, x_s0)
}

/// UniC-p corrector update; the last node must be the step target (`r_p = 1`).
pub fn unic_step(s: &NoiseSchedule, ctx: &UniStepContext, xc_s0: &DVector<f64>) -> Result<DVector<f64>> {
    if ctx.r.last().is_none_or(|&r| (r - 1.0).abs() > 1e-12) {
        return Err(Error::MissingHistory { step: 0, needed: 1, available: 0 });
    }
    uni_update(s, ctx, xc_s0)
}

/// Linear weights of a UniPC update: `x_new = ratio·base + Σ_m w[m]·ε(node m)`, node 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct UniWeights {
    pub ratio: f64,
    pub w: Vec<f64>,
}

pub fn uni_weights(
    s: &NoiseSchedule,
    lam0: f64,
    lam_target: f64,
    r: &[f64],
    bh: BVariant,
) -> Result<UniWeights> {
    let h = lam_target - lam0;
    let (a, b) = uni_coeffs(r, h, bh)?;
    let sig = s.sigma_of_lambda(lam_target);
    let ratio = s.alpha_of_lambda(lam_target) / s.alpha_of_lambda(lam0);
    let node: Vec<f64> = a.iter().zip(r).map(|(am, rm)| -sig * b * am / rm).collect();
    let mut w = Vec::with_capacity(r.len() + 1);
    w.push(-sig * h.exp_m1() - node.iter().sum::<f64>());
    w.extend(node);
    Ok(UniWeights { ratio, w })
}

/// Multistep fractions `r_m = (λ_{i-1-m} - λ_{i-1})/h_i`, m = 1..count (negative).
pub fn multistep_fractions(grid: &TimeGrid, i: usize, count: usize) -> Result<Vec<f64>> {
    if i < count + 1 {
        return Err(Error::MissingHistory { step: i, needed: count, available: i.saturating_sub(1) });
    }
    let h = grid.h[i - 1];
    Ok((1..=count).map(|m| (grid.lam[i - 1 - m] - grid.lam[i - 1]) / h).collect())
}

fn check_uni_order(p: usize) -> Result<()> {
    if !(1..=3).contains(&p) {
        return Err(Error::Domain(format!("UniPC order must be 1..=3, got {p}")));
    }
    Ok(())
}

/// Runs any scheme on `grid`; the oracle spreads its substeps evenly over the grid intervals.
pub fn run_scheme(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    scheme: Scheme,
    opts: &UniOptions,
) -> Result<SolverRun> {
    match scheme {
        Scheme::Oracle { substeps } => {
            let per = substeps.div_ceil(grid.steps().max(1)).max(1);
            rk4_on_grid(s, m, x_t, grid, per)
        }
        Scheme::Dpm(k) => run_dpm(s, m, x_t, grid, k),
        Scheme::UniP(p) => run_unip(s, m, x_t, grid, p, opts),
        Scheme::UniPc(p) => run_unipc(s, m, x_t, grid, p, opts),
    }
}

/// UniP-p run (predictor only).
pub fn run_unip(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    p: usize,
    opts: &UniOptions,
) -> Result<SolverRun> {
    run_uni(s, m, x_t, grid, p, opts, false)
}

/// UniPC-p run: predictor plus corrector, corrected states fed back.
pub fn run_unipc(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    p: usize,
    opts: &UniOptions,
) -> Result<SolverRun> {
    run_uni(s, m, x_t, grid, p, opts, true)
}

fn run_uni(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    p: usize,
    opts: &UniOptions,
    correct: bool,
) -> Result<SolverRun> {
    check_uni_order(p)?;
    check_start(m, x_t)?;
    match &opts.mode {
        UniMode::Multistep => run_uni_multistep(s, m, x_t, grid, p, opts.bh, correct),
        UniMode::SingleStep { r } => {
            let r = match r {
                Some(r) => r.clone(),
                None => (1..p).map(|k| k as f64 / p as f64).collect(),
            };
            if r.len() != p - 1 || r.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::Domain(format!(
                    "single-step UniPC-{p} needs {} fractions in (0, 1)",
                    p - 1
                )));
            }
            run_uni_single(s, m, x_t, grid, p, opts.bh, &r, correct)
        }
    }
}

fn eval_cached(
    m: &PolyNoiseModel,
    xp: &[DVector<f64>],
    grid: &TimeGrid,
    j: usize,
    eps: &mut [Option<DVector<f64>>],
    nfe: &mut usize,
) -> Result<()> {
    if eps[j].is_none() {
        eps[j] = Some(m.eval_eps(&xp[j], grid.lam[j])?);
        *nfe += 1;
    }
    Ok(())
}

fn run_uni_multistep(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    p: usize,
    bh: BVariant,
    correct: bool,
) -> Result<SolverRun> {
    let mut xc = vec![x_t.clone()];
    let mut xp = vec![x_t.clone()];
    // ε at predictor states, reused as interpolation data
    let mut eps: Vec<Option<DVector<f64>>> = vec![None; grid.len()];
    let mut nfe = 0;
    for i in 1..grid.len() {
        if i < p {
            let next = dpm_step(s, m, &xc[i - 1], i, grid, p)?;
            nfe += p;
            xp.push(next.clone());
            xc.push(next);
            continue;
        }
        for j in (i - p)..i {
            eval_cached(m, &xp, grid, j, &mut eps, &mut nfe)?;
        }
        let r = multistep_fractions(grid, i, p - 1)?;
        let eps0 = eps[i - 1].clone().unwrap();
        let nodes: Vec<_> = (1..p).map(|mm| eps[i - 1 - mm].clone().unwrap()).collect();
        let ctx = UniStepContext::new(grid.lam[i - 1], grid.lam[i], r.clone(), bh, eps0.clone(), &nodes)?;
        let pred = unip_step(s, &ctx, &xc[i - 1])?;
        xp.push(pred);
        if correct {
            eval_cached(m, &xp, grid, i, &mut eps, &mut nfe)?;
            let mut rc = r;
            rc.push(1.0);
            let mut nodes_c = nodes;
            nodes_c.push(eps[i].clone().unwrap());
            let ctx_c = UniStepContext::new(grid.lam[i - 1], grid.lam[i], rc, bh, eps0, &nodes_c)?;
            xc.push(unic_step(s, &ctx_c, &xc[i - 1])?);
        } else {
            xc.push(xp[i].clone());
        }
    }
    let scheme = if correct { Scheme::UniPc(p) } else { Scheme::UniP(p) };
    let mut run = SolverRun::new(grid, xc, nfe, scheme);
    if correct {
        run.predictor = Some(xp);
    }
    Ok(run)
}

#[allow(clippy::too_many_arguments)]
fn run_uni_single(
    s: &NoiseSchedule,
    m: &PolyNoiseModel,
    x_t: &DVector<f64>,
    grid: &TimeGrid,
    p: usize,
    bh: BVariant,
    r: &[f64],
    correct: bool,
) -> Result<SolverRun> {
    let mut xs = vec![x_t.clone()];
    let mut xp = vec![x_t.clone()];
    let mut nfe = 0;
    let k_inner = (p - 1).max(1);
    for i in 1..grid.len() {
        let (l0, l1) = (grid.lam[i - 1], grid.lam[i]);
        let x0 = &xs[i - 1];
        let eps0 = m.eval_eps(x0, l0)?;
        nfe += 1;
        let mut nodes = Vec::with_capacity(p);
        for &rm in r {
            let sl = l0 + rm * (l1 - l0);
            let xm = dpm_step_between(s, m, x0, l0, sl, k_inner)?;
            nfe += k_inner;
            nodes.push(m.eval_eps(&xm, sl)?);
            nfe += 1;
        }
        let ctx = UniStepContext::new(l0, l1, r.to_vec(), bh, eps0.clone(), &nodes)?;
        let pred = unip_step(s, &ctx, x0)?;
        if correct {
            let mut rc = r.to_vec();
            rc.push(1.0);
            nodes.push(m.eval_eps(&pred, l1)?);
            nfe += 1;
            let ctx_c = UniStepContext::new(l0, l1, rc, bh, eps0, &nodes)?;
            let next = unic_step(s, &ctx_c, x0)?;
            xp.push(pred);
            xs.push(next);
        } else {
            xp.push(pred.clone());
            xs.push(pred);
        }
    }
    let scheme = if correct { Scheme::UniPc(p) } else { Scheme::UniP(p) };
    let mut run = SolverRun::new(grid, xs, nfe, scheme);
    if correct {
        run.predictor = Some(xp);
    }
    Ok(run)
}
