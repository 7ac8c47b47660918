//! One function per subcommand. Each writes its files and returns a summary for sweeps.

use carleman_dpm::carleman::CarlemanBasis;
use carleman_dpm::diagnostics::{dissipativity_p, spectrum_trace, truncation_sweep, SweepOptions, TruncationRow};
use carleman_dpm::readout::{support_shots, support_trials, TrialSummary};
use carleman_dpm::reference::{run_scheme, Scheme, SolverRun};
use carleman_dpm::schedule::{default_grid, NoiseSchedule, TimeGrid};
use carleman_dpm::solve::{forward_substitute, gmres_solve, lchs_solve, PsdBenchmark, SolveResult};
use carleman_dpm::system::{
    build_system, condition_number, export_text, sparsity_stats, BlockLinearSystem, ConditionReport, SystemMeta,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{RunConfig, SolverKind};
use crate::error::CliError;
use crate::output::{num, OutDir};

/// Endpoint figures a sweep merges into its table.
#[derive(Debug, Clone, Default)]
pub struct PointSummary {
    pub steps: usize,
    pub h: f64,
    pub nfe: Option<usize>,
    pub err: Option<f64>,
    pub defect: Option<f64>,
    pub kappa: Option<f64>,
}

fn mean_step(grid: &TimeGrid) -> f64 {
    (grid.lam[grid.steps()] - grid.lam[0]) / grid.steps() as f64
}

fn dim_columns(prefix: &str, d: usize) -> String {
    (1..=d).map(|i| format!(",{prefix}{i}")).collect()
}

fn vec_columns(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!(",{}", num(*x))).collect()
}

fn oracle_run(
    cfg: &RunConfig,
    s: &NoiseSchedule,
    m: &carleman_dpm::model::PolyNoiseModel,
    x: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<Option<SolverRun>, CliError> {
    if !cfg.oracle.enabled {
        return Ok(None);
    }
    let oracle = Scheme::Oracle { substeps: cfg.oracle.substeps };
    Ok(Some(run_scheme(s, m, x, grid, oracle, &cfg.uni_options())?))
}

pub fn simulate(cfg: &RunConfig, out: &OutDir) -> Result<PointSummary, CliError> {
    let s = cfg.build_schedule()?;
    let m = cfg.build_model()?;
    let x = cfg.start_state(&m)?;
    let scheme = cfg.scheme_tag()?;
    let grid = default_grid(&s, cfg.steps)?;
    let run = run_scheme(&s, &m, &x, &grid, scheme, &cfg.uni_options())?;
    let oracle = oracle_run(cfg, &s, &m, &x, &grid)?;
    let d = m.dim();

    let mut csv = out.csv("trajectory.csv");
    csv.meta(&format!("scheme={scheme} M={} nfe={}", grid.steps(), run.nfe));
    let mut header = format!("step,t,lambda,alpha{}{}", dim_columns("x", d), dim_columns("x_over_alpha", d));
    if oracle.is_some() {
        header.push_str(",err_oracle");
    }
    csv.row(&header);
    for (i, p) in run.states.iter().enumerate() {
        let alpha = s.alpha(p.t);
        let mut line = format!("{i},{},{},{}{}{}", num(p.t), num(p.lam), num(alpha), vec_columns(&p.x), vec_columns(&(&p.x / alpha)));
        if let Some(o) = &oracle {
            line.push_str(&format!(",{}", num((&p.x - &o.states[i].x).norm())));
        }
        csv.row(&line);
    }
    out.finish(csv)?;

    let err = oracle.as_ref().map(|o| (run.endpoint() - o.endpoint()).norm());
    let mut summary = out.csv("summary.csv");
    summary.row("scheme,d,M,nfe,err_endpoint");
    summary.row(&format!("{scheme},{d},{},{},{}", grid.steps(), run.nfe, err.map_or("nan".into(), num)));
    out.finish(summary)?;

    Ok(PointSummary { steps: grid.steps(), h: mean_step(&grid), nfe: Some(run.nfe), err, ..Default::default() })
}

/// Largest per-block deviation of the global solution from sequential stepping, relative to max(1, ‖seq‖).
fn equivalence_error(
    sys: &BlockLinearSystem,
    sol: &DVector<f64>,
    seq: &carleman_dpm::carleman::LiftedRun,
    times: &[f64],
) -> Result<f64, CliError> {
    let glob = sys.split(sol, times)?;
    let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm().max(1.0);
    let mut worst = glob.states.iter().zip(&seq.states).map(|(g, q)| rel(&g.y, &q.y)).fold(0.0, f64::max);
    if let (Some(gz), Some(qz)) = (&glob.corrected, &seq.corrected) {
        worst = gz.iter().zip(qz).map(|(g, q)| rel(g, q)).fold(worst, f64::max);
    }
    Ok(worst)
}

pub fn carleman(cfg: &RunConfig, out: &OutDir) -> Result<PointSummary, CliError> {
    let s = cfg.build_schedule()?;
    let m = cfg.build_model()?;
    let x = cfg.start_state(&m)?;
    let scheme = cfg.scheme_tag()?;
    let grid = default_grid(&s, cfg.steps)?;
    let basis = CarlemanBasis::new(m.dim(), cfg.order)?.with_policy(cfg.policy());
    let build = build_system(&s, &m, &x, &grid, scheme, cfg.bh_variant(), &basis)?;
    let sys = &build.system;

    if cfg.solver.export_matrix {
        out.write_raw("matrix.txt", &export_text(&sys.mat))?;
    }

    let mut solves: Vec<SolveResult> = Vec::new();
    if matches!(cfg.solver.kind, SolverKind::Forward | SolverKind::Both) {
        solves.push(forward_substitute(sys)?);
    }
    if matches!(cfg.solver.kind, SolverKind::Gmres | SolverKind::Both) {
        solves.push(gmres_solve(sys, cfg.solver.tol, cfg.solver.max_iter, cfg.solver.restart)?);
    }

    let mut csv = out.csv("solve.csv");
    csv.meta(&format!("scheme={scheme} N={} M={} dim={} policy={:?}", cfg.order, grid.steps(), sys.dim(), cfg.truncation));
    let mut header = "solver,iterations,residual".to_string();
    if cfg.solver.check_equivalence {
        header.push_str(",equiv_err");
    }
    csv.row(&header);
    let mut equiv = Vec::new();
    for r in &solves {
        let mut line = format!("{},{},{}", r.solver, r.iterations, num(r.residual));
        if cfg.solver.check_equivalence {
            let e = equivalence_error(sys, &r.solution, &build.sequential, &grid.t)?;
            line.push_str(&format!(",{}", num(e)));
            equiv.push((r.solver, e));
        }
        csv.row(&line);
    }
    out.finish(csv)?;

    let report = if cfg.solver.condition { Some(condition_number(sys)?) } else { None };
    if let Some(rep) = &report {
        write_condition(cfg, out, &m, scheme, rep)?;
    } else {
        let st = sparsity_stats(sys);
        let mut csv = out.csv("sparsity.csv");
        csv.row("s_row,s_col,nnz,dim");
        csv.row(&format!("{},{},{},{}", st.s_row, st.s_col, st.nnz, sys.dim()));
        out.finish(csv)?;
    }

    // Output trajectory from the first solve
    let oracle = oracle_run(cfg, &s, &m, &x, &grid)?;
    let nonlinear = run_scheme(&s, &m, &x, &grid, scheme, &cfg.uni_options())?;
    let solved = sys.split(&solves[0].solution, &grid.t)?.block1(&basis);
    let d = m.dim();
    let mut csv = out.csv("trajectory.csv");
    csv.meta(&format!("solver={}", solves[0].solver));
    let mut header = format!("step,t{},err_scheme", dim_columns("x", d));
    if oracle.is_some() {
        header.push_str(",err_oracle");
    }
    csv.row(&header);
    for (i, xi) in solved.iter().enumerate() {
        let mut line = format!("{i},{}{},{}", num(grid.t[i]), vec_columns(xi), num((xi - &nonlinear.states[i].x).norm()));
        if let Some(o) = &oracle {
            line.push_str(&format!(",{}", num((xi - &o.states[i].x).norm())));
        }
        csv.row(&line);
    }
    out.finish(csv)?;

    let end = solved.last().expect("nonempty");
    let err = oracle.as_ref().map(|o| (end - o.endpoint()).norm());
    let defect = carleman_dpm::carleman::consistency_defect(
        sys.split(&solves[0].solution, &grid.t)?.states.last().expect("nonempty"),
        &basis,
    );

    if !cfg.orders.is_empty() {
        // Orders below the step-polynomial degree only exist under hard truncation
        let opts = SweepOptions { bh: cfg.bh_variant(), oracle_substeps: cfg.oracle.substeps, ..SweepOptions::default() };
        let rows = truncation_sweep(&s, &m, &x, &grid, scheme, &cfg.orders, &opts)?;
        let mut csv = out.csv("truncation.csv");
        csv.meta(&format!("scheme={scheme} M={} policy=hard", grid.steps()));
        csv.row(TruncationRow::CSV_HEADER);
        for r in &rows {
            csv.row(&r.csv_row());
        }
        out.finish(csv)?;
    }

    // Equivalence violations are reported after every file is on disk
    let limit = |tag| match tag {
        carleman_dpm::solve::SolverTag::Forward => 1e-10,
        carleman_dpm::solve::SolverTag::Gmres => (1e3 * cfg.solver.tol).max(1e-10),
    };
    if let Some((tag, e)) = equiv.iter().find(|(tag, e)| !(*e <= limit(*tag))) {
        return Err(CliError::Numerical(carleman_dpm::Error::Structure(format!(
            "{tag} solution deviates from sequential stepping by {e:.3e}"
        ))));
    }

    Ok(PointSummary {
        steps: grid.steps(),
        h: mean_step(&grid),
        nfe: None,
        err,
        defect: Some(defect),
        kappa: report.map(|r| r.kappa),
    })
}

fn write_condition(
    cfg: &RunConfig,
    out: &OutDir,
    m: &carleman_dpm::model::PolyNoiseModel,
    scheme: Scheme,
    rep: &ConditionReport,
) -> Result<(), CliError> {
    let meta = SystemMeta {
        scheme: scheme.to_string(),
        d: m.dim(),
        j: m.degree(),
        n: cfg.order,
        m: cfg.steps,
        p: scheme.order(),
    };
    let mut csv = out.csv("condition.csv");
    csv.meta(&format!(
        "sigma_max={} sigma_min={} iterations={}",
        num(rep.sigma_max),
        num(rep.sigma_min),
        rep.iterations
    ));
    csv.row(ConditionReport::CSV_HEADER);
    csv.row(&rep.csv_row(&meta));
    out.finish(csv)
}

/// `e^{-AT}u0 + ∫₀ᵀ e^{-A(T-s)} b(s) ds` by composite Simpson.
fn constant_coefficient_reference(
    a: &DMatrix<f64>,
    b: Option<&dyn Fn(f64) -> DVector<f64>>,
    u0: &DVector<f64>,
    t_end: f64,
) -> DVector<f64> {
    let prop = |t: f64| (a * (-t)).exp();
    let mut u = prop(t_end) * u0;
    if let Some(b) = b {
        let n = 2000;
        let dt = t_end / n as f64;
        for i in 0..=n {
            let s = i as f64 * dt;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            u += prop(t_end - s) * b(s) * (w * dt / 3.0);
        }
    }
    u
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config("at `lchs.problem.a`: expected a square matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(n, n, &flat))
}

pub fn lchs(cfg: &RunConfig, out: &OutDir) -> Result<PointSummary, CliError> {
    let (a, source, u0, t_end, label) = match &cfg.lchs.problem {
        None => {
            let p = PsdBenchmark::new();
            (p.a, None, p.u0, p.t_end, "psd_benchmark")
        }
        Some(p) => {
            let a = to_matrix(&p.a)?;
            if p.u0.len() != a.nrows() || p.source.as_ref().is_some_and(|b| b.len() != a.nrows()) {
                return Err(CliError::Config("at `lchs.problem`: u0 and source must match A".into()));
            }
            if !(p.t_end >= 0.0) {
                return Err(CliError::Config("at `lchs.problem.t_end`: must be ≥ 0".into()));
            }
            (a, p.source.clone().map(DVector::from_vec), DVector::from_vec(p.u0.clone()), p.t_end, "inline")
        }
    };
    let builtin = cfg.lchs.problem.is_none();
    let b_fn = move |t: f64| -> DVector<f64> {
        match &source {
            Some(b) => b.clone(),
            None => PsdBenchmark::source(t),
        }
    };
    let has_source = builtin || cfg.lchs.problem.as_ref().is_some_and(|p| p.source.is_some());
    let a_fn = |_t: f64| a.clone();
    let reference =
        constant_coefficient_reference(&a, has_source.then_some(&b_fn as &dyn Fn(f64) -> DVector<f64>), &u0, t_end);

    let n = u0.len();
    let mut csv = out.csv("lchs.csv");
    csv.meta(&format!("problem={label} T={} reference=simpson_2000", num(t_end)));
    csv.row(&format!("K,nodes,substeps,shift{},err", dim_columns("u", n)));
    let mut last = None;
    for &k in &cfg.lchs.k_values {
        let lc = cfg.lchs_config(k);
        let b_dyn: &(dyn Fn(f64) -> DVector<f64> + Sync) = &b_fn;
        let sol = lchs_solve(&a_fn, has_source.then_some(b_dyn), &u0, t_end, &lc)?;
        let err = (&sol.u - &reference).norm();
        csv.row(&format!("{},{},{},{}{},{}", num(k), lc.nodes, lc.substeps, num(sol.shift), vec_columns(&sol.u), num(err)));
        last = Some(err);
    }
    out.finish(csv)?;
    Ok(PointSummary { err: last, ..Default::default() })
}

pub fn diagnose(cfg: &RunConfig, out: &OutDir) -> Result<PointSummary, CliError> {
    let s = cfg.build_schedule()?;
    let m = cfg.build_model()?;
    let x = cfg.start_state(&m)?;
    let scheme = cfg.scheme_tag()?;
    let grid = default_grid(&s, cfg.steps)?;
    let run = run_scheme(&s, &m, &x, &grid, scheme, &cfg.uni_options())?;
    let trace = spectrum_trace(&s, &m, &run)?;
    let grid_meta = format!("grid=realized scheme={scheme} M={} normalization={}", grid.steps(), num(trace.normalization));

    if cfg.diagnostics.spectrum {
        let mut csv = out.csv("spectrum.csv");
        csv.meta(&grid_meta);
        csv.row(&format!("step,t{}", dim_columns("eig", trace.dim())));
        for (i, (t, ev)) in trace.t.iter().zip(&trace.eigenvalues).enumerate() {
            let cols: String = ev.iter().map(|v| format!(",{}", num(*v))).collect();
            csv.row(&format!("{i},{}{cols}", num(*t)));
        }
        out.finish(csv)?;
    }
    if cfg.diagnostics.p {
        let p = dissipativity_p(&trace)?;
        let mut csv = out.csv("p.csv");
        csv.meta(&grid_meta);
        if p.all_zero {
            csv.meta("all eigenvalues zero; P defined as 1");
        }
        csv.row("step,t,P");
        for (i, (t, v)) in trace.t.iter().zip(&p.p).enumerate() {
            csv.row(&format!("{i},{},{}", num(*t), num(*v)));
        }
        out.finish(csv)?;
    }
    Ok(PointSummary { steps: grid.steps(), h: mean_step(&grid), nfe: Some(run.nfe), ..Default::default() })
}

pub fn readout(cfg: &RunConfig, out: &OutDir) -> Result<PointSummary, CliError> {
    let rc = &cfg.readout;
    let mut rows: Vec<TrialSummary> = Vec::new();
    for &r in &rc.r {
        let shots = support_shots(r, rc.shot_factor);
        for &amp in &rc.amp_shots {
            rows.push(support_trials(rc.dim, r, shots, amp, rc.trials, cfg.seed)?);
        }
    }
    let mut csv = out.csv("readout.csv");
    csv.meta("signs are taken from the classical solution vector; only support and magnitudes are sampled");
    csv.meta(&format!("seed={} shot_factor={}", cfg.seed, rc.shot_factor));
    csv.row(TrialSummary::CSV_HEADER);
    for r in &rows {
        csv.row(&r.csv_row());
    }
    out.finish(csv)?;
    Ok(PointSummary::default())
}
