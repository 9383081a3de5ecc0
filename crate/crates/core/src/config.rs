//! Experiment configuration: a strict JSON key tree.
//!
//! Unknown keys are errors and every error names the offending key path.
//! Defaults: `attacks` is empty, `smoothing` absent, `seed` 0; trainer,
//! sampler and attack defaults are documented on their own types.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::defenses::TrainerConfig;
use crate::error::{AtentError, Result};
use crate::models::Architecture;
use crate::smoothing::SmoothingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two MNIST digits, relabelled 0/1.
    MnistBinary {
        classes: [usize; 2],
        /// Cap on training samples per class.
        train_per_class: usize,
        /// Cap on test samples (all when absent).
        #[serde(default)]
        test_samples: Option<usize>,
        /// Directory holding the IDX files; `--data-dir` overrides it and
        /// `ATENT_DATA_DIR` is the fallback.
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    /// Two unit-variance Gaussian blobs in the unit square.
    TwoGaussians {
        n_train: usize,
        n_test: usize,
        separation: f64,
    },
}

impl DatasetSpec {
    pub fn sample_len(&self) -> usize {
        match self {
            DatasetSpec::MnistBinary { .. } => 28 * 28,
            DatasetSpec::TwoGaussians { .. } => 2,
        }
    }

    pub fn classes(&self) -> usize {
        2
    }

    pub fn is_2d(&self) -> bool {
        matches!(self, DatasetSpec::TwoGaussians { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Filesystem-safe run name.
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: Architecture,
    /// `trainer.seed` is replaced by the master `seed`.
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub smoothing: Option<SmoothingConfig>,
    pub output_dir: PathBuf,
    /// Master seed for data subsetting, initialization, training and attacks.
    #[serde(default)]
    pub seed: u64,
}

fn prefixed(prefix: &str, e: AtentError) -> AtentError {
    match e {
        // nested key paths join with '.'
        AtentError::Config(msg) => match msg.split_once(": ") {
            Some((key, rest)) if key.chars().all(|c| c.is_ascii_alphanumeric() || "_[].".contains(c)) => {
                AtentError::Config(format!("{prefix}.{key}: {rest}"))
            }
            _ => AtentError::Config(format!("{prefix}: {msg}")),
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let name_ok = !self.name.is_empty()
            && !self.name.starts_with('.')
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if !name_ok {
            return Err(AtentError::Config(format!(
                "name: {:?} must be nonempty ASCII letters, digits, '_', '-' or '.', not starting with '.'",
                self.name
            )));
        }
        match &self.dataset {
            DatasetSpec::MnistBinary {
                classes,
                train_per_class,
                ..
            } => {
                if classes[0] == classes[1] || classes.iter().any(|&c| c > 9) {
                    return Err(AtentError::Config("dataset.classes: need two distinct digits 0-9".into()));
                }
                if *train_per_class == 0 {
                    return Err(AtentError::Config("dataset.train_per_class: must be positive".into()));
                }
            }
            DatasetSpec::TwoGaussians {
                n_train,
                n_test,
                separation,
            } => {
                if *n_train < 20 || n_train % 2 != 0 || *n_test == 0 || n_test % 2 != 0 {
                    return Err(AtentError::Config(
                        "dataset: n_train (>= 20) and n_test must be even and positive".into(),
                    ));
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return Err(AtentError::Config("dataset.separation: must be nonnegative".into()));
                }
            }
        }
        self.model.validate().map_err(|e| prefixed("model", e))?;
        if self.model.input_len() != self.dataset.sample_len() {
            return Err(AtentError::Config(format!(
                "model: expects {} inputs per sample, dataset provides {}",
                self.model.input_len(),
                self.dataset.sample_len()
            )));
        }
        if self.model.classes() != self.dataset.classes() {
            return Err(AtentError::Config(format!(
                "model: has {} outputs, dataset has {} classes",
                self.model.classes(),
                self.dataset.classes()
            )));
        }
        self.trainer.validate().map_err(|e| prefixed("trainer", e))?;
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| prefixed(&format!("attacks[{i}]"), e))?;
        }
        if let Some(s) = &self.smoothing {
            s.validate().map_err(|e| prefixed("smoothing", e))?;
        }
        Ok(())
    }

    /// Trainer settings with the master seed applied.
    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            ..self.trainer.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Strict parse of a JSON config string; does not validate constraints.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        AtentError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AtentError::io(path, e))?;
    parse_config_str(&text)
}
