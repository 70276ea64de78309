//! Run configuration: TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::dataset::DatasetFormat;
use crate::eval::{EvalMode, EvalModel};
use crate::federation::{BudgetSpec, FederationConfig, Method, SyncStrategy};
use crate::model::{LossReduction, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub format: Option<DatasetFormat>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub local_epochs: Option<usize>,
    pub batch: Option<usize>,
    pub neg_ratio: Option<usize>,
    pub reduction: Option<LossReduction>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub rounds: Option<usize>,
    pub client_fraction: Option<f64>,
    pub sync: Option<SyncStrategy>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommSection {
    pub cr: Option<f64>,
    pub cr_range: Option<[f64; 2]>,
    pub alpha: Option<f64>,
    pub kmeans_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k: Option<usize>,
    pub mode: Option<EvalMode>,
    pub model: Option<EvalModel>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub every: Option<usize>,
}

/// The config file as written; every key is optional until resolution.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub fed: FedSection,
    #[serde(default)]
    pub comm: CommSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

impl RawConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Checks every value and fills defaults for the optional keys.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let dataset_path = self.dataset.path.clone().ok_or(ConfigError::Missing("dataset.path"))?;
        let dataset_format = self.dataset.format.unwrap_or(DatasetFormat::TabSeparated);
        let defaults = FederationConfig::default();
        let train_defaults = TrainConfig::default();

        let budget = match (self.comm.cr, self.comm.cr_range) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid {
                    key: "comm.cr",
                    message: "set either comm.cr or comm.cr_range, not both".into(),
                })
            }
            (Some(cr), None) => {
                unit_interval("comm.cr", cr)?;
                BudgetSpec::Uniform(cr)
            }
            (None, Some([lo, hi])) => {
                unit_interval("comm.cr_range", lo)?;
                unit_interval("comm.cr_range", hi)?;
                if lo > hi {
                    return Err(ConfigError::Invalid {
                        key: "comm.cr_range",
                        message: format!("lower bound {lo} exceeds upper bound {hi}"),
                    });
                }
                BudgetSpec::Range(lo, hi)
            }
            (None, None) => defaults.budget,
        };
        if let Some(a) = self.comm.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(ConfigError::Invalid {
                    key: "comm.alpha",
                    message: format!("must lie in (0, 1), got {a}"),
                });
            }
        }

        let dim = positive("model.dim", self.model.dim.unwrap_or(defaults.dim))?;
        let lr = self.train.lr.unwrap_or(train_defaults.lr);
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(ConfigError::Invalid {
                key: "train.lr",
                message: format!("must be finite and non-negative, got {lr}"),
            });
        }
        let client_fraction = self.fed.client_fraction.unwrap_or(defaults.client_fraction);
        if !(client_fraction > 0.0 && client_fraction <= 1.0) {
            return Err(ConfigError::Invalid {
                key: "fed.client_fraction",
                message: format!("must lie in (0, 1], got {client_fraction}"),
            });
        }

        let fed = FederationConfig {
            dim,
            train: TrainConfig {
                local_epochs: self.train.local_epochs.unwrap_or(train_defaults.local_epochs),
                batch_size: positive("train.batch", self.train.batch.unwrap_or(train_defaults.batch_size))?,
                neg_ratio: self.train.neg_ratio.unwrap_or(train_defaults.neg_ratio),
                lr,
                reduction: self.train.reduction.unwrap_or(train_defaults.reduction),
            },
            rounds: self.fed.rounds.unwrap_or(defaults.rounds),
            client_fraction,
            budget,
            alpha: self.comm.alpha,
            method: self.method.unwrap_or(defaults.method),
            sync: self.fed.sync.unwrap_or(defaults.sync),
            seed: self.seed.unwrap_or(defaults.seed),
            kmeans_max_iters: positive(
                "comm.kmeans_iters",
                self.comm.kmeans_iters.unwrap_or(defaults.kmeans_max_iters),
            )?,
            eval_k: positive("eval.k", self.eval.k.unwrap_or(defaults.eval_k))?,
            eval_mode: self.eval.mode.unwrap_or(defaults.eval_mode),
            eval_model: self.eval.model.unwrap_or(defaults.eval_model),
            probe_every: self.probe.every.unwrap_or(0),
        };
        Ok(RunConfig {
            dataset_path,
            dataset_format,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default")),
            fed,
        })
    }
}

fn unit_interval(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            key,
            message: format!("must lie in [0, 1), got {v}"),
        })
    }
}

fn positive(key: &'static str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(ConfigError::Invalid {
            key,
            message: "must be positive".into(),
        })
    } else {
        Ok(v)
    }
}

/// A validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_path: PathBuf,
    pub dataset_format: DatasetFormat,
    pub output_dir: PathBuf,
    pub fed: FederationConfig,
}
