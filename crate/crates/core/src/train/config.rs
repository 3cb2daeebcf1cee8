use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, DEFAULT_REDUCTION};
use crate::datagen::hex_digest;
use crate::error::{Error, Result};
use crate::losses::{LossTerms, LossWeights};
use crate::model::{BackboneId, ModelConfig, SmallCnnConfig, DEFAULT_SCALE};

/// Every knob of a training run. Serialized as JSON with exactly these
/// field names; unknown keys are rejected and missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub loss_terms: LossTerms,
    /// Number of expert branches `K`.
    pub branches: usize,
    pub topn_fraction: f64,
    /// Distillation weight is zero for epochs before this one.
    pub kd_warmup_epochs: usize,
    pub backbone: BackboneId,
    pub widths: Vec<usize>,
    /// Attention placed after each backbone stage.
    pub attention: Vec<AttentionKind>,
    pub reduction: usize,
    pub head_scale: f64,
    /// Random horizontal flips of training images.
    pub augmentation: bool,
    /// Also checkpoint every this many epochs; 0 checkpoints only at the end.
    pub save_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let cnn = SmallCnnConfig::default();
        Self {
            epochs: 150,
            lr_initial: 0.1,
            lr_min: 0.0001,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            weights: LossWeights::default(),
            loss_terms: LossTerms::default(),
            branches: 2,
            topn_fraction: 0.3,
            kd_warmup_epochs: 0,
            backbone: BackboneId::SmallCnn,
            widths: cnn.widths,
            attention: cnn.attention,
            reduction: DEFAULT_REDUCTION,
            head_scale: DEFAULT_SCALE,
            augmentation: false,
            save_every: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::invalid(format!("lr_initial must be > 0, got {}", self.lr_initial)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_initial) {
            return Err(Error::invalid(format!(
                "lr_min must lie in [0, lr_initial], got {}",
                self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.topn_fraction > 0.0 && self.topn_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "topn_fraction must lie in (0, 1], got {}",
                self.topn_fraction
            )));
        }
        self.weights.validate()?;
        self.model_config(2, 64).validate()
    }

    pub fn model_config(&self, num_classes: usize, image_size: usize) -> ModelConfig {
        ModelConfig {
            branches: self.branches,
            num_classes,
            head_scale: self.head_scale,
            backbone: self.backbone,
            small_cnn: SmallCnnConfig {
                image_size,
                in_channels: 1,
                widths: self.widths.clone(),
                attention: self.attention.clone(),
                reduction: self.reduction,
            },
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
