//! Run configuration: TOML with nested sections; unknown keys rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::NormConstants;
use crate::error::{Error, Result};
use crate::head::{default_heads, AttentionHeadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub threshold: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub heads: Vec<AttentionHeadConfig>,
    pub norm: NormConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head_lr: 0.1,
            backbone_lr: 0.01,
            epochs: 50,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            threshold: 0.5,
            seed: 0,
            train_fraction: 0.8,
            image_size: 224,
            backbone: BackboneConfig::resnet50(),
            heads: default_heads(),
            norm: NormConstants::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration for CPU-scale runs.
    pub fn desk() -> Self {
        TrainConfig {
            backbone: BackboneConfig::desk(),
            image_size: 64,
            batch_size: 8,
            epochs: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_lr <= 0.0 || self.backbone_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0,1], got {}",
                self.threshold
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("momentum must lie in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(
                "train_fraction must lie strictly in (0,1)".into(),
            ));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one attention head required".into()));
        }
        for h in &self.heads {
            h.validate()?;
        }
        self.backbone.validate()?;
        if self.image_size < self.backbone.min_input_size() {
            return Err(Error::Config(format!(
                "image_size {} below the backbone minimum {}",
                self.image_size,
                self.backbone.min_input_size()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the serialized config, echoed in all run artifacts.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
