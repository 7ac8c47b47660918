//! Cartesian parameter sweeps: points run in parallel, each into its own directory, and are
//! merged in grid order.

use carleman_dpm::diagnostics::ls_slope;
use rayon::prelude::*;

use crate::commands::{self, PointSummary};
use crate::config::{RunConfig, SweepCommand};
use crate::error::CliError;
use crate::output::{num, OutDir};

const HEADER: &str = "kind,point,scheme,preset,N,M,h,nfe,err,defect,kappa,slope";

/// Point configurations in grid order (scheme, preset, order, steps; last axis fastest).
pub fn expand(base: &RunConfig) -> Result<Vec<RunConfig>, CliError> {
    let sw = base.sweep.as_ref().ok_or_else(|| CliError::Config("at `sweep`: the sweep command needs a grid".into()))?;
    let or_base = |v: &Vec<String>, b: Option<String>| -> Vec<Option<String>> {
        if v.is_empty() {
            vec![b]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    };
    let schemes = or_base(&sw.scheme, Some(base.scheme.clone()));
    let presets = or_base(&sw.preset, base.model.preset.clone());
    let orders = if sw.order.is_empty() { vec![base.order] } else { sw.order.clone() };
    let steps = if sw.steps.is_empty() { vec![base.steps] } else { sw.steps.clone() };
    if !sw.preset.is_empty() && base.model.preset.is_none() {
        return Err(CliError::Config("at `sweep.preset`: the base model must be a preset".into()));
    }
    let mut points = Vec::new();
    for sc in &schemes {
        for pr in &presets {
            for &n in &orders {
                for &mm in &steps {
                    let mut c = base.clone();
                    c.sweep = None;
                    c.out = None;
                    c.scheme = sc.clone().expect("scheme is always set");
                    c.model.preset = pr.clone();
                    c.order = n;
                    c.steps = mm;
                    points.push(c);
                }
            }
        }
    }
    Ok(points)
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map_or(String::new(), f)
}

pub fn run(base: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let command = base.sweep.as_ref().map(|s| s.command).unwrap_or(SweepCommand::Simulate);
    let points = expand(base)?;
    for p in &points {
        p.validate()?;
    }
    let results: Vec<PointSummary> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let dir = OutDir::create(&out.root.join("points").join(format!("{i:04}")), p)?;
            match command {
                SweepCommand::Simulate => commands::simulate(p, &dir),
                SweepCommand::Carleman => commands::carleman(p, &dir),
            }
        })
        .collect::<Result<_, _>>()?;

    let mut csv = out.csv("sweep.csv");
    csv.meta(&format!("command={command:?} points={}", points.len()));
    csv.row(HEADER);
    let preset_of = |p: &RunConfig| p.model.preset.clone().unwrap_or_else(|| "inline".into());
    for (i, (p, r)) in points.iter().zip(&results).enumerate() {
        csv.row(&format!(
            "point,{i},{},{},{},{},{},{},{},{},{},",
            p.scheme,
            preset_of(p),
            p.order,
            r.steps,
            num(r.h),
            opt(r.nfe, |v| v.to_string()),
            opt(r.err, num),
            opt(r.defect, num),
            opt(r.kappa, num),
        ));
    }

    // One slope row per (scheme, preset, N) group spanning at least two step counts
    type Key = (String, String, usize);
    let mut groups: Vec<(Key, Vec<(f64, f64)>)> = Vec::new();
    for (p, r) in points.iter().zip(&results) {
        let key = (p.scheme.clone(), preset_of(p), p.order);
        let idx = match groups.iter().position(|g| g.0 == key) {
            Some(k) => k,
            None => {
                groups.push((key, Vec::new()));
                groups.len() - 1
            }
        };
        if let Some(e) = r.err.filter(|e| *e > 0.0) {
            groups[idx].1.push((r.h.ln(), e.ln()));
        }
    }
    let distinct_steps = base.sweep.as_ref().map_or(0, |s| s.steps.len());
    if distinct_steps >= 2 {
        for ((scheme, preset, n), pts) in &groups {
            if pts.len() >= 2 {
                csv.row(&format!("slope,,{scheme},{preset},{n},,,,,,,{}", num(ls_slope(pts))));
            }
        }
    }
    out.finish(csv)
}
