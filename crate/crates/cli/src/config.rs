//! JSON run configuration.

use carleman_dpm::carleman::TruncationPolicy;
use carleman_dpm::model::{presets, PolyNoiseModel};
use carleman_dpm::reference::{BVariant, Scheme, UniMode, UniOptions};
use carleman_dpm::schedule::NoiseSchedule;
use carleman_dpm::solve::LchsConfig;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    /// Starting state; defaults to the benchmark value in every coordinate.
    pub x_t: Option<Vec<f64>>,
    /// `dpm_k`, `unip_p` or `unic_p`.
    pub scheme: String,
    /// Number of solver steps M.
    pub steps: usize,
    /// Carleman truncation order N.
    pub order: usize,
    /// Extra truncation orders for a truncation table (carleman command).
    pub orders: Vec<usize>,
    pub truncation: Truncation,
    pub bh: Bh,
    pub uni_mode: UniModeConfig,
    /// Interpolation fractions for single-step UniPC (default m/p).
    pub uni_r: Option<Vec<f64>>,
    pub oracle: OracleConfig,
    pub solver: SolverConfig,
    pub lchs: LchsSection,
    pub diagnostics: DiagnosticsConfig,
    pub readout: ReadoutConfig,
    pub sweep: Option<SweepConfig>,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            x_t: None,
            scheme: "dpm_2".into(),
            steps: 16,
            order: 4,
            orders: Vec::new(),
            truncation: Truncation::Strict,
            bh: Bh::Bh2,
            uni_mode: UniModeConfig::Multistep,
            uni_r: None,
            oracle: OracleConfig::default(),
            solver: SolverConfig::default(),
            lchs: LchsSection::default(),
            diagnostics: DiagnosticsConfig::default(),
            readout: ReadoutConfig::default(),
            sweep: None,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    pub t_floor: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let (beta_min, beta_max, t_max) = presets::BENCHMARK_SCHEDULE;
        Self { beta_min, beta_max, t_max, t_floor: None }
    }
}

/// Exactly one of `preset`, `scalar`, `separable`, `kron`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Option<String>,
    /// Dimension for the `zero` and `dissipative` presets.
    pub dim: usize,
    /// `[j, l, c]` triples: c·(λ − 0)^l·x^j.
    pub scalar: Option<Vec<(usize, usize, f64)>>,
    pub separable: Option<Vec<Vec<(usize, usize, f64)>>>,
    pub kron: Option<Vec<KronTerm>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { preset: Some("weak_quadratic".into()), dim: 1, scalar: None, separable: None, kron: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KronTerm {
    pub j: usize,
    pub l: usize,
    /// Row-major d × d^j coefficient matrix.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    Strict,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bh {
    Bh1,
    Bh2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniModeConfig {
    Multistep,
    SingleStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub enabled: bool,
    pub substeps: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { enabled: true, substeps: carleman_dpm::reference::DEFAULT_ORACLE_SUBSTEPS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Forward,
    Gmres,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
    /// Compare the global solve against sequential lifted stepping.
    pub check_equivalence: bool,
    pub export_matrix: bool,
    pub condition: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Forward,
            tol: 1e-10,
            max_iter: 10_000,
            restart: 100,
            check_equivalence: true,
            export_matrix: true,
            condition: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LchsSection {
    /// Truncation bounds K to evaluate; each uses `nodes_per_unit·K + 1` nodes.
    pub k_values: Vec<f64>,
    pub nodes_per_unit: usize,
    pub substeps: usize,
    pub normalize: bool,
    /// Constant-coefficient problem; the built-in 2×2 benchmark when absent.
    pub problem: Option<LchsProblem>,
}

impl Default for LchsSection {
    fn default() -> Self {
        Self { k_values: vec![8.0, 16.0, 32.0, 64.0], nodes_per_unit: 8, substeps: 64, normalize: false, problem: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LchsProblem {
    pub a: Vec<Vec<f64>>,
    pub source: Option<Vec<f64>>,
    pub u0: Vec<f64>,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub spectrum: bool,
    pub p: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { spectrum: true, p: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    pub r: Vec<usize>,
    pub dim: usize,
    pub trials: usize,
    /// Support shots are `⌈shot_factor·r·ln r⌉`.
    pub shot_factor: f64,
    pub amp_shots: Vec<usize>,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self { r: vec![2, 4, 8], dim: 1024, trials: 100, shot_factor: 20.0, amp_shots: vec![1000, 10_000, 100_000] }
    }
}

/// Cartesian parameter grid; unset axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub command: SweepCommand,
    pub scheme: Vec<String>,
    pub preset: Vec<String>,
    pub order: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { command: SweepCommand::Simulate, scheme: vec![], preset: vec![], order: vec![], steps: vec![] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepCommand {
    Simulate,
    Carleman,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| cfg_err(format!("at `{}`: {}", e.path(), e.inner())))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.scheme_tag()?;
        if self.steps == 0 {
            return Err(cfg_err("`steps` must be ≥ 1"));
        }
        if self.order == 0 || self.orders.contains(&0) {
            return Err(cfg_err("truncation orders must be ≥ 1"));
        }
        if !(self.solver.tol > 0.0) || self.solver.restart == 0 {
            return Err(cfg_err("`solver.tol` must be > 0 and `solver.restart` ≥ 1"));
        }
        if self.uni_r.is_some() && self.uni_mode != UniModeConfig::SingleStep {
            return Err(cfg_err("at `uni_r`: fractions apply to uni_mode = single_step only"));
        }
        if let Some(r) = &self.uni_r {
            if r.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(cfg_err("at `uni_r`: fractions must lie in (0, 1)"));
            }
        }
        if self.oracle.substeps == 0 {
            return Err(cfg_err("`oracle.substeps` must be ≥ 1"));
        }
        if self.lchs.k_values.iter().any(|k| !(*k > 0.0)) || self.lchs.nodes_per_unit == 0 || self.lchs.substeps == 0 {
            return Err(cfg_err("`lchs` needs K > 0, nodes_per_unit ≥ 1, substeps ≥ 1"));
        }
        if self.readout.r.iter().any(|&r| r == 0 || r > self.readout.dim) || !(self.readout.shot_factor > 0.0) {
            return Err(cfg_err("`readout.r` entries must lie in 1..=dim and shot_factor > 0"));
        }
        if let Some(sw) = &self.sweep {
            for s in &sw.scheme {
                s.parse::<Scheme>().map_err(|e| cfg_err(format!("at `sweep.scheme`: {e}")))?;
            }
            if sw.steps.contains(&0) || sw.order.contains(&0) {
                return Err(cfg_err("`sweep.steps` and `sweep.order` entries must be ≥ 1"));
            }
        }
        self.build_schedule()?;
        let m = self.build_model()?;
        self.start_state(&m)?;
        Ok(())
    }

    pub fn scheme_tag(&self) -> Result<Scheme, CliError> {
        match self.scheme.parse::<Scheme>() {
            Ok(Scheme::Oracle { .. }) => Err(cfg_err("at `scheme`: the oracle is not a sampler scheme")),
            Ok(s) => Ok(s),
            Err(e) => Err(cfg_err(format!("at `scheme`: {e}"))),
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule, CliError> {
        let c = &self.schedule;
        let s = NoiseSchedule::vp(c.beta_min, c.beta_max, c.t_max).map_err(|e| cfg_err(format!("at `schedule`: {e}")))?;
        match c.t_floor {
            Some(tf) => s.with_t_floor(tf).map_err(|e| cfg_err(format!("at `schedule.t_floor`: {e}"))),
            None => Ok(s),
        }
    }

    pub fn build_model(&self) -> Result<PolyNoiseModel, CliError> {
        let c = &self.model;
        let set = [c.preset.is_some(), c.scalar.is_some(), c.separable.is_some(), c.kron.is_some()];
        if set.iter().filter(|b| **b).count() != 1 {
            return Err(cfg_err("at `model`: give exactly one of preset, scalar, separable, kron"));
        }
        let wrap = |field: &str, e: carleman_dpm::Error| cfg_err(format!("at `model.{field}`: {e}"));
        if let Some(p) = &c.preset {
            return presets::by_name(p, c.dim).map_err(|e| wrap("preset", e));
        }
        if let Some(t) = &c.scalar {
            return PolyNoiseModel::scalar(t).map_err(|e| wrap("scalar", e));
        }
        if let Some(t) = &c.separable {
            return PolyNoiseModel::separable(t).map_err(|e| wrap("separable", e));
        }
        let terms = c.kron.as_ref().expect("one source is set");
        let d = c.dim;
        let mut entries = Vec::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            let cols = d.checked_pow(t.j as u32).ok_or_else(|| cfg_err("at `model.kron`: degree too large"))?;
            if t.matrix.len() != d || t.matrix.iter().any(|r| r.len() != cols) {
                return Err(cfg_err(format!("at `model.kron[{i}].matrix`: expected {d} rows of {cols} entries")));
            }
            let flat: Vec<f64> = t.matrix.iter().flatten().copied().collect();
            entries.push((t.j, t.l, DMatrix::from_row_slice(d, cols, &flat)));
        }
        PolyNoiseModel::kron(d, entries).map_err(|e| wrap("kron", e))
    }

    pub fn start_state(&self, m: &PolyNoiseModel) -> Result<DVector<f64>, CliError> {
        match &self.x_t {
            Some(x) if x.len() == m.dim() => Ok(DVector::from_vec(x.clone())),
            Some(x) => Err(cfg_err(format!("at `x_t`: expected {} entries, got {}", m.dim(), x.len()))),
            None => Ok(DVector::from_element(m.dim(), presets::BENCHMARK_X_T)),
        }
    }

    pub fn policy(&self) -> TruncationPolicy {
        match self.truncation {
            Truncation::Strict => TruncationPolicy::Strict,
            Truncation::Hard => TruncationPolicy::Hard,
        }
    }

    pub fn bh_variant(&self) -> BVariant {
        match self.bh {
            Bh::Bh1 => BVariant::Bh1,
            Bh::Bh2 => BVariant::Bh2,
        }
    }

    pub fn uni_options(&self) -> UniOptions {
        let mode = match self.uni_mode {
            UniModeConfig::Multistep => UniMode::Multistep,
            UniModeConfig::SingleStep => UniMode::SingleStep { r: self.uni_r.clone() },
        };
        UniOptions { bh: self.bh_variant(), mode }
    }

    pub fn lchs_config(&self, k: f64) -> LchsConfig {
        LchsConfig {
            normalize: self.lchs.normalize,
            substeps: self.lchs.substeps,
            ..LchsConfig::with_density(k, self.lchs.nodes_per_unit)
        }
    }

    /// Canonical JSON of the resolved configuration (output directory excluded).
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        serde_json::to_string(&c).expect("config serializes")
    }
}
