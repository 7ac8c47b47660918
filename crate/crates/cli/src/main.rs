//! Batch front end for the Carleman/DPM toolkit.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod output;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use output::OutDir;

#[derive(Parser)]
#[command(name = "carleman-dpm", version, about = "Carleman-linearized diffusion sampler experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config; default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Nonlinear sampler trajectory with oracle errors.
    Simulate,
    /// Global Carleman system: export, solve, conditioning, truncation table.
    Carleman,
    /// LCHS emulation against a constant-coefficient reference.
    Lchs,
    /// Drift spectra and the dissipativity measure P.
    Diagnose,
    /// Sampling-based sparse readout trials.
    Readout,
    /// Parameter grid over simulate or carleman.
    Sweep,
}

fn load(cli: &Cli) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            config::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    cfg.out = None;
    cfg.validate()?;
    // Record the values actually used
    let m = cfg.build_model()?;
    cfg.x_t = Some(cfg.start_state(&m)?.iter().copied().collect());
    cfg.schedule.t_floor = Some(cfg.build_schedule()?.t_floor);
    Ok((cfg, out))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let (cfg, out) = load(cli)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(format!("--workers: {e}")))?;
    }
    let dir = OutDir::create(&out, &cfg)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &dir).map(drop),
        Command::Carleman => commands::carleman(&cfg, &dir).map(drop),
        Command::Lchs => commands::lchs(&cfg, &dir).map(drop),
        Command::Diagnose => commands::diagnose(&cfg, &dir).map(drop),
        Command::Readout => commands::readout(&cfg, &dir).map(drop),
        Command::Sweep => sweep::run(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("carleman-dpm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
