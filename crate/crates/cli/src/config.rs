use std::fs;
use std::path::{Path, PathBuf};

use meanteach::synth::{DatasetSpec, GeneratorConfig};
use meanteach::trainer::{Ablation, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    pub root_seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_labeled: 20,
            n_unlabeled: 200,
            n_validation: 20,
            root_seed: 1,
            generator: GeneratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            generator: self.generator.clone(),
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_validation: self.n_validation,
            root_seed: self.root_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Dataset root used by `sweep`, `ablate` and `eval` when `--data` is
    /// not given. Relative paths resolve against the config file.
    pub data_dir: Option<PathBuf>,
    /// Run only this method in `sweep`; both when absent.
    pub mode: Option<Mode>,
    pub ablations: Vec<Ablation>,
    pub labeled_fractions: Vec<f64>,
    pub replicate_seeds: Vec<u64>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            data_dir: None,
            mode: None,
            ablations: vec![Ablation::Full, Ablation::NoMgd, Ablation::NoPsm],
            labeled_fractions: vec![0.1, 0.2, 0.4, 0.8, 1.0],
            replicate_seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a command needs, as read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must be present and equal to [`SCHEMA_VERSION`].
    #[serde(default)]
    pub schema_version: u32,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "schema_version must be {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file; with no path, returns the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))?;
        if let (Some(dir), Some(base)) = (cfg.experiment.data_dir.as_mut(), path.parent()) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let ex = &self.experiment;
        if ex.labeled_fractions.is_empty() || ex.replicate_seeds.is_empty() {
            return Err(CliError::config(
                "need at least one labeled fraction and one replicate seed",
            ));
        }
        if let Some(f) = ex.labeled_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CliError::config(format!("labeled fraction {f} is outside (0, 1]")));
        }
        if ex.ablations.is_empty() {
            return Err(CliError::config("need at least one ablation"));
        }
        Ok(())
    }
}

pub fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "mmt_psm" => Ok(Mode::MmtPsm),
        "supervised_only" => Ok(Mode::SupervisedOnly),
        _ => Err(format!("unknown mode {s:?} (expected mmt_psm or supervised_only)")),
    }
}

pub fn parse_ablation(s: &str) -> Result<Ablation, String> {
    match s {
        "full" => Ok(Ablation::Full),
        "no_mgd" => Ok(Ablation::NoMgd),
        "no_psm" => Ok(Ablation::NoPsm),
        _ => Err(format!("unknown ablation {s:?} (expected full, no_mgd or no_psm)")),
    }
}
