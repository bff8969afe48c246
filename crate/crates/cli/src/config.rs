//! Run configuration files and the built-in presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nvflow::experiments::{self, Experiment, PublishedCell, CONVERGENCE_KS, CONVERGENCE_M};
use nvflow::models::{build_model, Model, ModelParams, Sde};
use nvflow::pricing::{Payoff, TimingProtocol};
use nvflow::qmc::PointSource;
use nvflow::schemes::SchemeKind;

pub const SCHEMA_VERSION: u32 = 1;

/// Presets shipped in the repository, embedded so they resolve by name from
/// any working directory.
pub const PRESET_FILES: [(&str, &str); 6] = [
    ("sabr", include_str!("../presets/sabr.json")),
    ("sabr_fig1", include_str!("../presets/sabr_fig1.json")),
    ("gensabr", include_str!("../presets/gensabr.json")),
    ("multisabr", include_str!("../presets/multisabr.json")),
    ("multisabr_avg", include_str!("../presets/multisabr_avg.json")),
    ("multisabr_lower", include_str!("../presets/multisabr_lower.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Label written to the `model` CSV column.
    pub name: String,
    pub model: ModelParams,
    pub x0: Vec<f64>,
    pub payoff: Payoff,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub schemes: Vec<SchemeKind>,
    #[serde(rename = "K")]
    pub ks: Vec<usize>,
    #[serde(rename = "M")]
    pub m: u64,
    #[serde(default)]
    pub reference: Option<f64>,
    #[serde(default)]
    pub sequence: PointSource,
    #[serde(default)]
    pub fusion: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub timing: TimingConfig,
}

/// Cells and protocol for `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    #[serde(default)]
    pub protocol: TimingProtocol,
    /// `(scheme, K)` pairs; empty means every scheme at every K.
    #[serde(default)]
    pub cells: Vec<TimingCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingCell {
    pub scheme: SchemeKind,
    #[serde(rename = "K")]
    pub k: usize,
}

/// Why a configuration could not be used.
#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            ConfigError::Parse(m) => write!(f, "malformed configuration: {m}"),
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl RunConfig {
    pub fn from_experiment(name: &str, e: Experiment, cells: &[PublishedCell]) -> Self {
        RunConfig {
            version: SCHEMA_VERSION,
            name: name.to_string(),
            model: e.model,
            x0: e.x0,
            payoff: e.payoff,
            horizon: e.horizon,
            schemes: SchemeKind::ALL[..3].to_vec(),
            ks: CONVERGENCE_KS.to_vec(),
            m: CONVERGENCE_M,
            reference: e.reference,
            sequence: PointSource::Sobol,
            fusion: false,
            output: None,
            timing: TimingConfig {
                protocol: TimingProtocol::default(),
                cells: cells.iter().map(|c| TimingCell { scheme: c.scheme, k: c.k }).collect(),
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks everything that can be checked without simulating and returns
    /// the built model.
    pub fn validate(&self) -> Result<Model, ConfigError> {
        let model = build_model(&self.model).map_err(invalid)?;
        model.check_state(&self.x0).map_err(invalid)?;
        self.payoff.validate(&model).map_err(invalid)?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("T = {} must be positive", self.horizon)));
        }
        if self.schemes.is_empty() {
            return Err(invalid("no scheme selected"));
        }
        if self.ks.is_empty() {
            return Err(invalid("the K grid is empty"));
        }
        if self.ks.contains(&0) {
            return Err(invalid("every K must be positive"));
        }
        if self.m == 0 {
            return Err(invalid("M must be positive"));
        }
        if let Some(r) = self.reference {
            if !(r.is_finite() && r != 0.0) {
                return Err(invalid("reference must be finite and nonzero"));
            }
        }
        self.timing.protocol.validate().map_err(invalid)?;
        if self.timing.cells.iter().any(|c| c.k == 0) {
            return Err(invalid("timing cells need a positive K"));
        }
        Ok(model)
    }

    /// Timing cells restricted to the selected schemes.
    pub fn timing_cells(&self) -> Vec<(SchemeKind, usize)> {
        if self.timing.cells.is_empty() {
            return self
                .schemes
                .iter()
                .flat_map(|&s| self.ks.iter().map(move |&k| (s, k)))
                .collect();
        }
        self.timing
            .cells
            .iter()
            .filter(|c| self.schemes.contains(&c.scheme))
            .map(|c| (c.scheme, c.k))
            .collect()
    }
}

/// The configuration a shipped preset was generated from.
pub fn generated_preset(name: &str) -> Option<RunConfig> {
    if name == "sabr_fig1" {
        let (e, cells) = experiments::preset("sabr")?;
        let mut cfg = RunConfig::from_experiment(name, e, &cells);
        cfg.schemes = vec![SchemeKind::NvDrift];
        cfg.timing.cells.retain(|c| c.scheme == SchemeKind::NvDrift);
        return Some(cfg);
    }
    let (e, cells) = experiments::preset(name)?;
    Some(RunConfig::from_experiment(name, e, &cells))
}

/// Loads a config file, or a preset by name (with or without `.json`).
pub fn load(arg: &str) -> Result<RunConfig, ConfigError> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        return RunConfig::from_json(&text);
    }
    let stem = arg.strip_suffix(".json").unwrap_or(arg);
    match PRESET_FILES.iter().find(|(n, _)| *n == stem) {
        Some((_, text)) => RunConfig::from_json(text),
        None => Err(ConfigError::Io(
            path.to_path_buf(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or preset"),
        )),
    }
}
