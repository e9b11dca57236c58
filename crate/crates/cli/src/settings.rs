//! Per-command settings: defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use procova_mmrm::inference::VcovFlavor;
use procova_mmrm::{ColumnMap, CovarianceKind, ModelSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::output::Format;
use crate::CliError;

/// Keys that may appear at the top level of any config file and apply to
/// every command.
pub const GLOBAL_KEYS: [&str; 4] = ["seed", "workers", "output", "format"];

/// Commands whose settings carry their own `seed`.
const SEEDED: [&str; 2] = ["simulate", "subsample-study"];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse().map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Top-level global keys of the config file.
pub fn load_globals(path: Option<&Path>) -> Result<Globals, CliError> {
    let Some(path) = path else {
        return Ok(Globals::default());
    };
    let globals: toml::Table =
        read_table(path)?.into_iter().filter(|(k, _)| GLOBAL_KEYS.contains(&k.as_str())).collect();
    toml::Value::Table(globals)
        .try_into()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Reads `path` and returns the table for `command`: the `[command]`
/// section if present, otherwise the top-level keys. Global keys are
/// handled by [`load_globals`].
pub fn load<S: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<S, CliError> {
    let Some(path) = path else {
        return Ok(S::default());
    };
    let mut table = read_table(path)?;
    let global_seed = table.get("seed").cloned();
    let mut section = match table.remove(command) {
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(config_err(format!("[{command}] must be a table"))),
        None => table
            .into_iter()
            .filter(|(k, _)| !crate::COMMANDS.contains(&k.as_str()) && !GLOBAL_KEYS.contains(&k.as_str()))
            .collect(),
    };
    // seeded commands fall back to the top-level seed
    if let Some(seed) = global_seed.filter(|_| SEEDED.contains(&command)) {
        section.entry("seed").or_insert(seed);
    }
    toml::Value::Table(section)
        .try_into()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn config_err(msg: String) -> CliError {
    CliError::Lib(procova_mmrm::Error::Config(msg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    #[default]
    Procova,
    Unadjusted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub input: Option<PathBuf>,
    pub model: Model,
    /// Baseline covariates (by column name) entering the mean model.
    pub adjust: Vec<String>,
    pub ladder: Vec<CovarianceKind>,
    pub vcov: VcovFlavor,
    pub alpha: f64,
    pub columns: ColumnMap,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            input: None,
            model: Model::Procova,
            adjust: Vec::new(),
            ladder: ModelSpec::DEFAULT_LADDER.to_vec(),
            vcov: VcovFlavor::Sandwich,
            alpha: 0.05,
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSettings {
    pub dropout: f64,
    pub gamma: f64,
    pub sigma: Option<f64>,
    pub lambda: f64,
    pub r: Option<f64>,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub target_power: f64,
    pub n_start: usize,
    pub n_end: usize,
    pub n_step: usize,
}

impl Default for PowerSettings {
    fn default() -> Self {
        Self {
            dropout: 0.0,
            gamma: 1.0,
            sigma: None,
            lambda: 1.0,
            r: None,
            alpha: 0.05,
            beta: None,
            target_power: 0.8,
            n_start: 100,
            n_end: 1000,
            n_step: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArmFilter {
    #[default]
    Control,
    Treatment,
    All,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSettings {
    pub input: Option<PathBuf>,
    pub arm: ArmFilter,
    pub columns: ColumnMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsampleSettings {
    /// Dataset to subsample; a simulated linear-scenario trial when absent.
    pub input: Option<PathBuf>,
    pub fraction: f64,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Score-outcome correlation of the simulated trial.
    pub correlation: f64,
    pub n_per_arm: usize,
    pub columns: ColumnMap,
}

impl Default for SubsampleSettings {
    fn default() -> Self {
        Self {
            input: None,
            fraction: 0.75,
            reps: 1000,
            seed: 1,
            alpha: 0.05,
            correlation: 0.5,
            n_per_arm: 1000,
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssSettings {
    pub v_benchmark: Option<f64>,
    pub v_new: Option<f64>,
    pub n: Option<f64>,
    /// Control-arm size and precision slope for the control-arm approximation.
    pub n0: Option<f64>,
    pub f_prime: Option<f64>,
    /// Dataset for the full-data vs complete-case precision check.
    pub input: Option<PathBuf>,
    pub columns: ColumnMap,
}
