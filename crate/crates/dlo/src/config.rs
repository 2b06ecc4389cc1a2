//! Run configuration: versioned TOML, fully validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::expand::ExpansionSpec;
use crate::model::ModelConfig;
use crate::router::{DEFAULT_BETA, DEFAULT_GAMMA};
use crate::tasks::TaskSpec;
use crate::tensor::Dtype;
use crate::trainer::AdamWConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Target skip rate rho.
    pub rho: f64,
    /// Warm-start rate rho-bar.
    #[serde(default)]
    pub rho_start: f64,
    /// Anneal horizon T'.
    pub anneal_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Schema version; must equal [`CONFIG_VERSION`].
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    /// Total optimizer steps T.
    pub total_steps: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Training precision.
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    pub model: ModelConfig,
    /// Applied to the freshly initialized (or loaded) model before training.
    #[serde(default)]
    pub expansion: Option<ExpansionSpec>,
    /// Resume/start from an existing checkpoint instead of random init.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default)]
    pub router: RouterConfig,
    pub task: TaskSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(DloError::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(DloError::Config(
                "batch_size and total_steps must be >= 1".into(),
            ));
        }
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.schedule.rho)
            || !(0.0..1.0).contains(&self.schedule.rho_start)
            || self.schedule.rho_start > self.schedule.rho
        {
            return Err(DloError::Config(format!(
                "schedule needs 0 <= rho_start <= rho < 1, got {}/{}",
                self.schedule.rho_start, self.schedule.rho
            )));
        }
        if self.router.gamma <= 0.0 || self.router.beta <= self.router.gamma {
            return Err(DloError::Config(
                "router needs gamma > 0 and beta > gamma".into(),
            ));
        }
        if self.optim.base_lr <= 0.0 || !(0.0..1.0).contains(&self.optim.warmup_ratio) {
            return Err(DloError::Config(
                "optimizer needs base_lr > 0 and warmup_ratio in [0, 1)".into(),
            ));
        }
        if let Some(exp) = &self.expansion {
            exp.validate(self.model.n_layers)?;
        }
        Ok(())
    }
}

/// Parse and validate a run config from TOML text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig =
        toml::from_str(text).map_err(|e| DloError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| DloError::io(path.display().to_string(), e))?;
    parse_config(&text).map_err(|e| e.with_path(path))
}

/// Parse and validate a standalone task spec from TOML text.
pub fn parse_task_spec(text: &str) -> Result<TaskSpec> {
    let spec: TaskSpec = toml::from_str(text).map_err(|e| DloError::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// A task spec on its own, for `--task` flags outside a full run config.
pub fn load_task_spec(path: &Path) -> Result<TaskSpec> {
    let text =
        std::fs::read_to_string(path).map_err(|e| DloError::io(path.display().to_string(), e))?;
    parse_task_spec(&text).map_err(|e| e.with_path(path))
}
