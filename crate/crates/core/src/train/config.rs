//! Training configuration, read from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::VariantSpec;
use crate::train::data::DataSource;

/// Environment variable overriding [`TrainConfig::seed`].
pub const SEED_ENV: &str = "VIP_SEED";

fn default_true() -> bool {
    true
}

fn default_eval_interval() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name such as `vip-nano`; exclusive with `spec`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// Inline variant specification; exclusive with `variant`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<VariantSpec>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Stochastic-depth rate of the deepest block.
    pub drop_path: f64,
    pub seed: u64,
    pub train_data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate (and checkpoint) every this many epochs.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Random flip and padded crop on training batches.
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates, and applies the `VIP_SEED` override.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("{SEED_ENV}=`{v}`: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// The variant to build, with its class count taken from the data.
    pub fn variant_spec(&self) -> Result<VariantSpec> {
        match (&self.variant, &self.spec) {
            (Some(name), None) => VariantSpec::from_name(name),
            (None, Some(spec)) => Ok(spec.clone()),
            _ => Err(Error::Config("give exactly one of `variant` and `spec`".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.variant.is_some() == self.spec.is_some() {
            problems.push("give exactly one of `variant` and `spec`".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.warmup_epochs >= self.epochs && self.epochs > 0 {
            problems.push(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            problems.push(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            problems.push(format!("drop_path must lie in [0, 1), got {}", self.drop_path));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.eval_interval == 0 {
            problems.push("eval_interval must be positive".to_string());
        }
        if let Some(spec) = &self.spec {
            if let Err(Error::Spec(p)) = spec.validate() {
                problems.extend(p);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
