//! Experiment configuration: one JSON document embedding the dataset,
//! training, loss, and perturbation sections, with dotted-path overrides
//! from the command line. Every section is optional and defaults match the
//! corner-digit experiment.

use crate::CliError;
use fcl_core::dataset::SynthConfig;
use fcl_core::losses::LossConfig;
use fcl_core::model::ModelSpec;
use fcl_core::perturbation::PerturbationSpec;
use fcl_core::trainer::{TrainConfig, DEFAULT_DROP_THRESHOLD};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset root; falls back to $FCL_DATA_DIR, then ./data.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Seeds for the training sweep; each seed trains one model.
    pub seeds: Vec<u64>,
    pub model: ModelSpec,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Optional explicit loss section; must agree with `train` where the
    /// two overlap (tau, lambda). Gamma lives only here.
    pub loss: Option<LossConfig>,
    /// Optional explicit perturbation section; must agree with `train`
    /// (k, sigma). The drop threshold lives only here.
    pub perturbation: Option<PerturbationSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            model: ModelSpec::lenet_corner_digits(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            loss: None,
            perturbation: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads the config file (or starts from defaults), applies dotted-path
    /// overrides, then validates everything before any work happens.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(format!("config {} is not valid JSON: {e}", p.display()))
                })?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        for (dotted, raw) in overrides {
            apply_override(&mut value, dotted, raw)?;
        }
        let config: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.model.validate().map_err(|e| cfg(&e))?;
        self.synth.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list must not be empty".into()));
        }
        if let Some(loss) = &self.loss {
            loss.validate().map_err(|e| cfg(&e))?;
            if loss.tau != self.train.tau {
                return Err(CliError::Config(format!(
                    "loss.tau ({}) disagrees with train.tau ({})",
                    loss.tau, self.train.tau
                )));
            }
            if loss.lambda != self.train.lambda {
                return Err(CliError::Config(format!(
                    "loss.lambda ({}) disagrees with train.lambda ({})",
                    loss.lambda, self.train.lambda
                )));
            }
        }
        if let Some(p) = &self.perturbation {
            if p.k != self.train.k {
                return Err(CliError::Config(format!(
                    "perturbation.k ({}) disagrees with train.k ({})",
                    p.k, self.train.k
                )));
            }
            if p.sigma != self.train.sigma {
                return Err(CliError::Config(format!(
                    "perturbation.sigma ({}) disagrees with train.sigma ({})",
                    p.sigma, self.train.sigma
                )));
            }
            p.validate(self.model.input_len()).map_err(|e| cfg(&e))?;
        }
        Ok(())
    }

    pub fn drop_threshold(&self) -> f64 {
        self.perturbation.as_ref().map(|p| p.drop_threshold).unwrap_or(DEFAULT_DROP_THRESHOLD)
    }

    pub fn resolve_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("FCL_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `dotted` (e.g. `train.tau`) in the raw JSON document. The value is
/// parsed as JSON when possible (numbers, booleans, arrays) and treated as a
/// string otherwise. Keys use the JSON spelling, i.e. kebab-case.
fn apply_override(
    root: &mut serde_json::Value,
    dotted: &str,
    raw: &str,
) -> Result<(), CliError> {
    let segments: Vec<&str> = dotted.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("malformed override path --{dotted}")));
    }
    let mut cur = root;
    for seg in &segments[..segments.len() - 1] {
        let map = cur.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("override --{dotted}: {seg} is not an object"))
        })?;
        cur = map
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let map = cur.as_object_mut().ok_or_else(|| {
        CliError::Config(format!("override --{dotted}: parent is not an object"))
    })?;
    let value = serde_json::from_str::<serde_json::Value>(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    map.insert(segments.last().unwrap().to_string(), value);
    Ok(())
}
