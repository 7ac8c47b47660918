use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_carleman-dpm");

fn run(dir: &Path, cmd: &str, config: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = dir.join(format!("{out}.json"));
    fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join(out))
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

/// Data rows of a CSV: comment lines dropped, header split off.
fn table(path: PathBuf) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let k = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_model_conserves_x_over_alpha() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "simulate", r#"{"model":{"preset":"zero","dim":2},"x_t":[0.3,-0.2],"scheme":"unic_2"}"#, "o", &[]);
    ok(&o);
    let (h, rows) = table(dir.path().join("o/trajectory.csv"));
    for (name, start) in [("x_over_alpha1", 0.3), ("x_over_alpha2", -0.2)] {
        let c = column(&h, &rows, name);
        let a0 = column(&h, &rows, "alpha")[0];
        for v in c {
            assert!((v - start / a0).abs() <= 1e-12 * (start / a0).abs(), "{name}: {v}");
        }
    }
}

#[test]
fn quadratic_dpm2_error_column_matches_summary() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "simulate", r#"{"model":{"preset":"quadratic"},"scheme":"dpm_2","steps":16}"#, "o", &[]);
    ok(&o);
    let (h, rows) = table(dir.path().join("o/trajectory.csv"));
    let err = column(&h, &rows, "err_oracle");
    assert_eq!(err[0], 0.0);
    let (sh, srows) = table(dir.path().join("o/summary.csv"));
    let end = column(&sh, &srows, "err_endpoint")[0];
    assert_eq!(*err.last().unwrap(), end);
    assert!(end > 0.0 && end < 0.05, "{end}");
    assert_eq!(column(&sh, &srows, "nfe")[0], 32.0);
}

#[test]
fn malformed_config_exits_2_with_field_path() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "simulate", r#"{"solver":{"tol":"tight"}}"#, "o", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver.tol"));

    let o = run(dir.path(), "simulate", r#"{"model":{"preset":"cubic","degree":3}}"#, "p", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.degree"));

    let o = run(dir.path(), "carleman", r#"{"scheme":"dpm_7"}"#, "q", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scheme"));
}

#[test]
fn gmres_non_convergence_exits_4() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), "carleman", r#"{"solver":{"kind":"gmres","max_iter":2,"restart":2}}"#, "o", &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn linear_preset_global_system_matches_stepping() {
    let dir = TempDir::new().unwrap();
    for (k, scheme) in ["dpm_1", "dpm_2", "unip_2", "unic_2"].iter().enumerate() {
        let cfg = format!(r#"{{"model":{{"preset":"linear"}},"scheme":"{scheme}","order":1,"steps":12}}"#);
        let name = format!("o{k}");
        ok(&run(dir.path(), "carleman", &cfg, &name, &[]));
        let (h, rows) = table(dir.path().join(&name).join("solve.csv"));
        let e = column(&h, &rows, "equiv_err")[0];
        assert!(e <= 1e-12, "{scheme}: {e}");
        // J = 1 lifting is exact: the lifted output equals the nonlinear scheme
        let (h, rows) = table(dir.path().join(&name).join("trajectory.csv"));
        assert!(column(&h, &rows, "err_scheme").iter().all(|v| *v <= 1e-12), "{scheme}");
    }
}

#[test]
fn gmres_matches_forward_substitution() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"scheme":"dpm_2","order":3,"steps":12,"solver":{"kind":"both","tol":1e-10,"restart":80}}"#;
    ok(&run(dir.path(), "carleman", cfg, "o", &[]));
    let (h, rows) = table(dir.path().join("o/solve.csv"));
    let res = column(&h, &rows, "residual");
    assert!(res[1] <= 1e-10, "{res:?}");
    let eq = column(&h, &rows, "equiv_err");
    assert!(eq[0] <= 1e-12 && eq[1] <= 1e-8, "{eq:?}");

    let mat = fs::read_to_string(dir.path().join("o/matrix.txt")).unwrap();
    let dims: Vec<usize> = mat.lines().next().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(dims[0], 13 * 3);
    assert_eq!(dims[2], mat.lines().count() - 1);
    let (h, rows) = table(dir.path().join("o/condition.csv"));
    assert_eq!(h.join(","), "scheme,d,J,N,M,p,kappa,method,s_row,s_col,nnz,dim");
    assert_eq!(rows[0][0], "dpm_2");
}

#[test]
fn truncation_table_improves_against_scheme() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), "carleman", r#"{"model":{"preset":"quadratic"},"orders":[2,3,4,5]}"#, "o", &[]));
    let (h, rows) = table(dir.path().join("o/truncation.csv"));
    let e = column(&h, &rows, "err_scheme");
    assert!(e.windows(2).all(|w| w[1] < w[0]), "{e:?}");
}

#[test]
fn diagnose_zero_model_eigenvalues_are_twice_the_drift_coefficient() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), "diagnose", r#"{"model":{"preset":"zero","dim":3},"steps":10}"#, "o", &[]));
    let (h, rows) = table(dir.path().join("o/spectrum.csv"));
    let t = column(&h, &rows, "t");
    // f(t) = -β(t)/2 for the default VP schedule
    for (i, ti) in t.iter().enumerate() {
        let beta = 0.1 + (20.0 - 0.1) * ti;
        for cell in &rows[i][2..5] {
            let v: f64 = cell.parse().unwrap();
            assert!((v + beta).abs() <= 1e-10 * beta, "{v} vs {}", -beta);
        }
    }
    let (h, rows) = table(dir.path().join("o/p.csv"));
    assert!(column(&h, &rows, "P").iter().all(|p| p.is_finite()));
}

#[test]
fn diagnose_dissipative_p_non_increasing_and_shape() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), "diagnose", r#"{"model":{"preset":"dissipative","dim":16},"steps":20}"#, "o", &[]));
    let (h, rows) = table(dir.path().join("o/spectrum.csv"));
    assert_eq!(h.len(), 18);
    assert!(rows.iter().all(|r| r.len() == 18));
    let (h, rows) = table(dir.path().join("o/p.csv"));
    let p = column(&h, &rows, "P");
    assert!(p.windows(2).all(|w| w[1] <= w[0]), "{p:?}");
    let text = fs::read_to_string(dir.path().join("o/p.csv")).unwrap();
    assert!(text.contains("grid=realized") && text.contains("M=20"));
}

#[test]
fn lchs_error_decreases_with_k() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), "lchs", r#"{"lchs":{"k_values":[8,16,32]}}"#, "o", &[]));
    let (h, rows) = table(dir.path().join("o/lchs.csv"));
    let e = column(&h, &rows, "err");
    assert!(e.windows(2).all(|w| w[1] < w[0]) && e[2] < 1e-3, "{e:?}");
}

#[test]
fn readout_reports_sign_caveat() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"readout":{"r":[2,4],"dim":64,"trials":10,"amp_shots":[500]}}"#;
    ok(&run(dir.path(), "readout", cfg, "o", &["--seed", "7"]));
    let text = fs::read_to_string(dir.path().join("o/readout.csv")).unwrap();
    assert!(text.contains("signs are taken from the classical solution vector"));
    let (h, rows) = table(dir.path().join("o/readout.csv"));
    assert_eq!(h.join(","), "r,dim,shots,trials,successes,amp_shots,l2_err");
    assert_eq!(rows.len(), 2);
}

#[test]
fn every_csv_starts_with_version_and_hash() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), "carleman", r#"{"orders":[3,4]}"#, "o", &[]));
    let ls = files(&dir.path().join("o"));
    let mut hashes = Vec::new();
    for (p, bytes) in &ls {
        if p.extension().is_some_and(|e| e == "csv") {
            let first = String::from_utf8_lossy(bytes).lines().next().unwrap().to_string();
            assert!(first.starts_with("# carleman-dpm 0.1.0 config-sha256="), "{}: {first}", p.display());
            hashes.push(first);
        }
    }
    assert!(hashes.len() >= 4);
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    assert!(dir.path().join("o/config.resolved.json").exists());
}

#[test]
fn sweep_of_one_point_matches_single_run() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), "simulate", r#"{"scheme":"unic_2","steps":10}"#, "single", &[]));
    ok(&run(dir.path(), "sweep", r#"{"scheme":"unic_2","steps":10,"sweep":{"steps":[10]}}"#, "sw", &[]));
    for f in ["trajectory.csv", "summary.csv", "config.resolved.json"] {
        let a = fs::read(dir.path().join("single").join(f)).unwrap();
        let b = fs::read(dir.path().join("sw/points/0000").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn step_grid_sweep_appends_slope_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"sweep":{"scheme":["dpm_1","dpm_2"],"steps":[8,16,32,64]}}"#;
    ok(&run(dir.path(), "sweep", cfg, "o", &[]));
    let text = fs::read_to_string(dir.path().join("o/sweep.csv")).unwrap();
    let slopes: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("slope,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(slopes.len(), 2);
    assert!((slopes[0] - 1.0).abs() < 0.15 && (slopes[1] - 2.0).abs() < 0.3, "{slopes:?}");
}

#[test]
fn outputs_are_byte_identical_across_workers_and_reruns() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"orders":[2,3],"sweep":{"command":"carleman","scheme":["dpm_2","unic_2"],"order":[3,4],"steps":[6,12]}}"#;
    ok(&run(dir.path(), "sweep", cfg, "w1", &["--workers", "1"]));
    ok(&run(dir.path(), "sweep", cfg, "w4", &["--workers", "4"]));
    ok(&run(dir.path(), "sweep", cfg, "w4b", &["--workers", "4"]));
    let a = files(&dir.path().join("w1"));
    assert!(a.len() > 8 * 5);
    assert_eq!(a, files(&dir.path().join("w4")));
    assert_eq!(a, files(&dir.path().join("w4b")));

    let rcfg = r#"{"readout":{"r":[3],"dim":128,"trials":20,"amp_shots":[200]}}"#;
    ok(&run(dir.path(), "readout", rcfg, "r1", &["--workers", "1", "--seed", "5"]));
    ok(&run(dir.path(), "readout", rcfg, "r4", &["--workers", "3", "--seed", "5"]));
    assert_eq!(files(&dir.path().join("r1")), files(&dir.path().join("r4")));
}
