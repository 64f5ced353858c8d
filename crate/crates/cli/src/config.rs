//! Run configuration: a TOML tree with one table per concern.
//!
//! ```toml
//! [system]           # name + parameter table
//! [scheme]           # integrator kind and step
//! [model]            # architecture, orders, widths, optional checkpoint
//! [loss]             # objective, norm, optimiser; [loss.collocation], [loss.data]
//! [sampler]          # HMC-H0 settings
//! [simulate] [evaluate] [bench] [adjoint]
//! [run]              # seed, iterations, output root, workers
//! ```
//!
//! Unknown keys are rejected. Overrides are `dotted.path=value` pairs whose
//! right-hand side is parsed as a TOML value (bare words fall back to
//! strings).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemBlock,
    pub scheme: Option<SchemeBlock>,
    pub model: Option<ModelBlock>,
    pub loss: Option<LossBlock>,
    pub sampler: Option<SamplerBlock>,
    pub simulate: Option<SimulateBlock>,
    pub evaluate: Option<EvaluateBlock>,
    pub bench: Option<BenchBlock>,
    pub adjoint: Option<AdjointBlock>,
    #[serde(default)]
    pub run: RunBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeBlock {
    pub kind: String,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Taylor,
    Fixed,
    T0Centered,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub architecture: ArchKind,
    /// Uniform Taylor order; `slow_order`/`fast_order` take precedence.
    #[serde(default)]
    pub order: usize,
    pub slow_order: Option<usize>,
    pub fast_order: Option<usize>,
    pub width: usize,
    pub depth: usize,
    #[serde(default = "yes")]
    pub gated: bool,
    /// Training window of the variable-step map.
    pub t_train: Option<f64>,
    /// Step of the fixed-step map.
    pub t0: Option<f64>,
    #[serde(default)]
    pub epsilon_conditioned: bool,
    #[serde(default)]
    pub speed_preserving: bool,
    /// Model directory to start from (train) or to load (other commands).
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Residual,
    Exact,
    Data,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Plain,
    EnergyBalanced,
}

fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    pub kind: LossKind,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate is multiplied by `decay_rate` every `decay_every` steps.
    pub decay_rate: Option<f64>,
    pub decay_every: Option<u64>,
    /// Loss-log cadence; defaults to a tenth of the run.
    pub eval_every: Option<usize>,
    /// Redraw collocation points every iteration.
    #[serde(default)]
    pub resample: bool,
    /// Held-out share of sample-set or data points.
    #[serde(default)]
    pub test_fraction: f64,
    pub collocation: Option<CollocationBlock>,
    pub data: Option<DataBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeKind {
    Grid,
    Uniform,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocationBlock {
    pub time: TimeKind,
    /// Times per phase point.
    #[serde(default = "one")]
    pub n: usize,
    pub t_max: f64,
    #[serde(default)]
    pub tau: f64,
    /// Draw the grid shift uniformly in `[0, h)` instead of using `tau`.
    #[serde(default)]
    pub random_shift: bool,
    pub batch: usize,
    pub epsilon: Option<[f64; 2]>,
    pub progressive: Option<ProgressiveBlock>,
    pub phase: PhaseBlock,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressiveBlock {
    pub t_start: f64,
    pub t_step: f64,
    pub every: usize,
}

/// Where phase points come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhaseBlock {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Shell { indices: Vec<usize>, r_min: f64, r_max: f64, lo: Vec<f64>, hi: Vec<f64> },
    /// An HMC-H0 run configured by the `[sampler]` table.
    Sampler,
    /// A sample CSV as written by `sample`.
    File { path: PathBuf },
    /// Explicit points.
    Points { points: Vec<Vec<f64>> },
}

fn default_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    /// Rollout length `S` of the data loss.
    pub steps: usize,
    /// Number of trajectories; box and shell sources draw this many.
    pub count: usize,
    /// Trajectories per iteration, 0 for all.
    #[serde(default)]
    pub batch: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    pub inputs: PhaseBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    #[default]
    Chain,
    Narrowband,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    #[serde(default)]
    pub mode: SamplerMode,
    pub h0: f64,
    #[serde(default = "band")]
    pub band_fraction: f64,
    pub lambda: f64,
    #[serde(default = "vv")]
    pub scheme: String,
    pub h: Option<f64>,
    pub n_samples: usize,
    #[serde(default = "levels")]
    pub levels: usize,
    #[serde(default = "retries")]
    pub max_retries: usize,
    /// Starting state; chains use its positions.
    pub start: Vec<f64>,
}

fn band() -> f64 {
    0.1
}
fn vv() -> String {
    "velocity_verlet".into()
}
fn levels() -> usize {
    16
}
fn retries() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub states: Vec<Vec<f64>>,
    pub horizon: f64,
    /// Keep every `stride`-th step in the trajectory CSV.
    #[serde(default = "one")]
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// `Φ(u, t_k)` straight from the start.
    #[default]
    OneStep,
    /// `Φ(·, dt)` composed `k` times.
    Rollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The `[scheme]` integrator.
    Scheme,
    /// Adaptive high-accuracy flow.
    #[default]
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateBlock {
    pub states: Option<Vec<Vec<f64>>>,
    /// Drawn from `[loss.collocation.phase]` when `states` is absent.
    #[serde(default)]
    pub n_states: usize,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default)]
    pub reference: ReferenceKind,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub fit_growth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchBlock {
    pub states: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub batch: usize,
    pub t_s: f64,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "one")]
    pub rounds: usize,
    #[serde(default)]
    pub schemes: Vec<SchemeBlock>,
    /// Step of the model solver; the model is benchmarked when set.
    pub model_dt: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointBlock {
    pub states: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub n_states: usize,
    /// Residual indices `0..=last`.
    pub last: usize,
    #[serde(default)]
    pub t0: f64,
    /// Random test directions per state.
    #[serde(default = "one")]
    pub directions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "iterations")]
    pub iterations: usize,
    #[serde(default = "output")]
    pub output: PathBuf,
    /// Subdirectory of the output root; defaults to the subcommand.
    pub name: Option<String>,
    /// Worker threads, 0 for all cores.
    #[serde(default)]
    pub workers: usize,
}

fn iterations() -> usize {
    1000
}
fn output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunBlock {
    fn default() -> Self {
        Self { seed: 0, iterations: iterations(), output: output(), name: None, workers: 0 }
    }
}

/// Applies `a.b.c=value` to a TOML tree, creating tables on the way.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key `{path}` has an empty segment")));
    }
    let value = parse_value(raw.trim());
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}` descends into a non-table")))?;
        node = table.entry(k.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("override `{path}` descends into a non-table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Reads, overrides and deserializes a config file. Relative paths inside
/// the config are resolved against the config's directory.
pub fn load(path: &Path, overrides: &[String]) -> Result<(RunConfig, Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut tree: Value = Value::Table(
        text.parse::<toml::Table>()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
    );
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let mut cfg: RunConfig = tree
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    Ok((cfg, tree))
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.exists() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = &mut self.model {
            if let Some(c) = &mut m.checkpoint {
                fix(c);
            }
        }
        if let Some(l) = &mut self.loss {
            if let Some(PhaseBlock::File { path }) = l.collocation.as_mut().map(|c| &mut c.phase) {
                fix(path);
            }
            if let Some(PhaseBlock::File { path }) = l.data.as_mut().map(|d| &mut d.inputs) {
                fix(path);
            }
        }
    }

    /// Referenced files must exist before anything runs.
    pub fn check_files(&self) -> Result<(), CliError> {
        let mut files: Vec<&Path> = Vec::new();
        if let Some(l) = &self.loss {
            if let Some(PhaseBlock::File { path }) = l.collocation.as_ref().map(|c| &c.phase) {
                files.push(path);
            }
            if let Some(PhaseBlock::File { path }) = l.data.as_ref().map(|d| &d.inputs) {
                files.push(path);
            }
        }
        if let Some(c) = self.model.as_ref().and_then(|m| m.checkpoint.as_deref()) {
            files.push(c);
        }
        match files.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(CliError::Config(format!("referenced path {} does not exist", p.display()))),
            None => Ok(()),
        }
    }
}
