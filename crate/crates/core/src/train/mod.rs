//! Pretraining with momentum SGD, checkpoints, linear-probe evaluation and
//! the ablation harness.

mod ablate;
mod checkpoint;
mod metrics;
mod pretrain;
mod probe;
mod sgd;

pub use ablate::{ablate, pooled_sd, variants, AblationAxis, AblationRow, AblationSummary, AblationTable, Variant, LAMBDA_SWEEP};
pub use checkpoint::{config_hash, Checkpoint};
pub use metrics::{MetricsRecord, MetricsWriter, METRICS_HEADER};
pub use pretrain::{pretrain, pretrain_with, PretrainOutput};
pub use probe::{cross_entropy, linear_probe, probe_model, ProbeReport};
pub use sgd::{sgd_step, Sgd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Terms};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub amfm_enabled: bool,
    pub cgra_enabled: bool,
    pub selfcl_enabled: bool,
    pub probe: ProbeConfig,
    /// Rescale the global gradient to at most this L2 norm before each
    /// update; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Record real elapsed milliseconds in the metrics. Off by default so
    /// that metrics files are byte-for-byte reproducible.
    pub record_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            amfm_enabled: true,
            cgra_enabled: true,
            selfcl_enabled: true,
            probe: ProbeConfig::default(),
            max_grad_norm: 5.0,
            record_wall_ms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_sgd("train", self.lr, self.momentum, self.weight_decay)?;
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::Config("train.max_grad_norm must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !self.cgra_enabled && !self.selfcl_enabled {
            return Err(Error::Config("at least one of cgra_enabled / selfcl_enabled must be true".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.probe.validate()
    }

    pub fn terms(&self) -> Terms {
        Terms {
            cgra: self.cgra_enabled,
            selfcl: self.selfcl_enabled,
        }
    }
}

fn validate_sgd(section: &str, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("{section}.lr must be non-negative, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("{section}.momentum must lie in [0, 1), got {momentum}")));
    }
    if !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::Config(format!("{section}.weight_decay must be non-negative, got {weight_decay}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// Frozen encoders, only the affine classifier trains.
    Linear,
    /// Encoders and fusion train together with the classifier.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Applied to the classifier layer only.
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Linear,
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.005,
            batch_size: 16,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        validate_sgd("probe", self.lr, self.momentum, self.weight_decay)?;
        if self.epochs == 0 {
            return Err(Error::Config("probe.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("probe.batch_size must be positive".into()));
        }
        Ok(())
    }
}
