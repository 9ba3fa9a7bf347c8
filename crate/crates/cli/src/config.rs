//! Config file loading and `--set` overrides.
//!
//! The file is TOML with the sections `gridwalk`, `features`, `regularizer`,
//! `experiment`, `sample` and an optional `mdp`. Overrides are dotted keys
//! applied to the parsed table before it is typed, so they win over file
//! values and are validated by the same code.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use regmis::experiments::{ExperimentConfig, FeatureConfig, RegChoice};
use regmis::gridwalk::GridwalkConfig;
use regmis::regularizers::ModelMean;
use regmis::{Error, Result};

/// Regularizer used by the single-estimate commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    /// Regularizing distribution, or `none`.
    pub dist: RegChoice,
    /// Model quality of a uniform-model anchor; unset anchors at zero.
    pub m: Option<f64>,
    pub masked: bool,
    pub model_mean: ModelMean,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            dist: RegChoice::Dist(regmis::gridwalk::DistName::Uniform),
            m: None,
            masked: false,
            model_mean: ModelMean::AllPairs,
        }
    }
}

/// Dataset used by the single-estimate commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    /// Defaults to `n`.
    pub n0: Option<usize>,
    pub seed: u64,
    pub replicate: u64,
    /// Read transitions from this CSV instead of sampling.
    pub data: Option<PathBuf>,
    /// Read initial states from this CSV instead of sampling.
    pub init: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 500,
            n0: None,
            seed: 0,
            replicate: 0,
            data: None,
            init: None,
        }
    }
}

/// A user-supplied MDP for `exact`, replacing the Gridwalk environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpConfig {
    /// MDP JSON file.
    pub path: PathBuf,
    /// Row-major `n_states × n_actions` action probabilities; uniform when unset.
    pub policy: Option<Vec<f64>>,
    /// Data distribution over pairs; uniform when unset.
    pub data_distribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub gridwalk: GridwalkConfig,
    pub features: FeatureConfig,
    pub regularizer: RegularizerConfig,
    pub experiment: Table,
    pub sample: SampleConfig,
    pub mdp: Option<MdpConfig>,
}

impl CliConfig {
    /// The experiment section combined with the shared environment sections.
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut table = self.experiment.clone();
        for key in ["gridwalk", "features"] {
            if table.contains_key(key) {
                return Err(Error::Config(format!("set `{key}` at the top level, not inside `experiment`")));
            }
        }
        table.insert("gridwalk".into(), Value::try_from(&self.gridwalk).map_err(config_error)?);
        table.insert("features".into(), Value::try_from(&self.features).map_err(config_error)?);
        let cfg: ExperimentConfig = Value::Table(table).try_into().map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Reads `path` (or starts empty), applies overrides and seed, and types the result.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<CliConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    if let Some(seed) = seed {
        let seed = Value::Integer(i64::try_from(seed).map_err(|_| Error::Config("seed must fit in i64".into()))?);
        set_path(&mut table, &["experiment", "master_seed"], seed.clone())?;
        set_path(&mut table, &["sample", "seed"], seed)?;
    }
    let cfg: CliConfig = Value::Table(table).try_into().map_err(config_error)?;
    cfg.gridwalk.validate()?;
    Ok(cfg)
}

/// Applies one `dotted.key=value` override; values are parsed as TOML, else taken as strings.
pub fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    set_path(table, &path, value)
}

fn set_path(table: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_are_typed() {
        let mut t: Table = "[gridwalk]\nwidth = 6\n".parse().unwrap();
        apply_override(&mut t, "gridwalk.width=8").unwrap();
        apply_override(&mut t, "regularizer.dist=p").unwrap();
        apply_override(&mut t, "experiment.sample_sizes=[100, 200]").unwrap();
        let cfg: CliConfig = Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.gridwalk.width, 8);
        assert_eq!(cfg.regularizer.dist.label(), "p");
        assert_eq!(cfg.experiment_config().unwrap().sample_sizes, vec![100, 200]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let mut t = Table::new();
        apply_override(&mut t, "gridwalk.colour=1").unwrap();
        let r: std::result::Result<CliConfig, _> = Value::Table(t).try_into();
        assert!(r.is_err());
        assert!(apply_override(&mut Table::new(), "novalue").is_err());
        assert!(load(Some(Path::new("/nonexistent/regmis.toml")), &[], None).unwrap_err().is_config());
    }

    #[test]
    fn seed_reaches_both_sections() {
        let cfg = load(None, &[], Some(42)).unwrap();
        assert_eq!(cfg.sample.seed, 42);
        assert_eq!(cfg.experiment_config().unwrap().master_seed, 42);
    }
}
