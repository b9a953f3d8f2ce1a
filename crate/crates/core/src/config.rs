//! JSON run configuration. Unknown keys are rejected and every error carries
//! the path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::diffusion::{DiffusionConfig, DiffusionSchedule};
use crate::flops::WorkloadSpec;
use crate::losses::LossConfig;
use crate::model::{Mode, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::patch::DataShapes;
use crate::schedule::{BatchConfig, Curriculum, LrConfig, TrainingSchedule};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: &str, message: impl std::fmt::Display) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            ConfigError::Io { .. } => None,
        }
    }
}

/// Cost-model settings that do not affect training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    pub views_per_modality: usize,
    pub training_multiplier: u64,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            views_per_modality: 2,
            training_multiplier: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataShapes,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub curriculum: Curriculum,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub lr: LrConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub flops: FlopsConfig,
    pub epochs: usize,
    pub dataset_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many optimizer steps; the schedule is unchanged.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Held-out pairs used for before/after evaluation.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
}

fn default_eval_size() -> usize {
    64
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::invalid(&path, e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Full configuration with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate(self.mode)
            .map_err(|e| ConfigError::invalid("model", e))?;
        self.data.validate().map_err(|e| ConfigError::invalid("data", e))?;
        self.loss.validate().map_err(|e| ConfigError::invalid("loss", e))?;
        self.optimizer
            .validate()
            .map_err(|e| ConfigError::invalid("optimizer", e))?;
        DiffusionSchedule::new(&self.diffusion).map_err(|e| ConfigError::invalid("diffusion", e))?;
        if self.epochs == 0 {
            return Err(ConfigError::invalid("epochs", "must be at least 1"));
        }
        if self.flops.views_per_modality != 2 {
            return Err(ConfigError::invalid(
                "flops.views_per_modality",
                "training always draws two views per modality",
            ));
        }
        if self.flops.training_multiplier == 0 {
            return Err(ConfigError::invalid("flops.training_multiplier", "must be positive"));
        }
        if self.eval_size < 2 {
            return Err(ConfigError::invalid(
                "eval_size",
                "contrastive evaluation needs at least 2 pairs",
            ));
        }
        if let Some(m) = self.batch.micro_batch {
            if m < 4 {
                return Err(ConfigError::invalid(
                    "batch.micro_batch",
                    "must be at least 4 so every split keeps 2 instances",
                ));
            }
        }
        let schedule = self.training_schedule()?;
        for row in schedule.rows() {
            let last = self.dataset_size - (row.steps - 1) * row.batch_size;
            if last < 2 {
                return Err(ConfigError::invalid(
                    "dataset_size",
                    format!(
                        "epoch {} would end with a batch of {last}; contrastive terms need 2",
                        row.epoch
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn training_schedule(&self) -> Result<TrainingSchedule, ConfigError> {
        TrainingSchedule::new(self.curriculum, self.epochs, &self.batch, self.lr, self.dataset_size).map_err(|e| {
            let path = match e {
                crate::schedule::ScheduleError::Config(_) => "curriculum",
                _ => "epochs",
            };
            ConfigError::invalid(path, e)
        })
    }

    pub fn workload(&self) -> WorkloadSpec {
        WorkloadSpec {
            mode: self.mode,
            model: self.model,
            shapes: self.data,
            curriculum: self.curriculum,
            epochs: self.epochs,
            dataset_size: self.dataset_size,
            views_per_modality: self.flops.views_per_modality,
            training_multiplier: self.flops.training_multiplier,
        }
    }

    /// Desk-scale run: 200 steps over 64 synthetic pairs.
    pub fn toy(mode: Mode) -> Self {
        RunConfig {
            mode,
            model: ModelConfig::toy(),
            data: DataShapes::toy(),
            synthetic: SyntheticConfig::default(),
            curriculum: Curriculum::Fixed { ratio: 0.5 },
            batch: BatchConfig {
                base_batch: 8,
                adaptive: false,
                micro_batch: None,
            },
            lr: LrConfig {
                base_lr: 3e-3,
                min_lr: 1e-6,
                warmup_epochs: 2,
                scale_with_batch: false,
            },
            optimizer: OptimizerConfig::default(),
            diffusion: DiffusionConfig::default(),
            loss: LossConfig {
                lambda_inter: 0.1,
                lambda_intra: 0.1,
                ..LossConfig::default()
            },
            flops: FlopsConfig::default(),
            epochs: 25,
            dataset_size: 64,
            seed: 0,
            max_steps: None,
            eval_size: 64,
        }
    }
}
