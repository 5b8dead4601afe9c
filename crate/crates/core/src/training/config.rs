use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optimizer::AdamConfig;
use crate::backbone::{BackboneConfig, LoraConfig};
use crate::cfdl::Orientation;
use crate::enhancer::EnhancerConfig;
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::sts::{AnchorPolicy, StsConfig};

/// Full training configuration. Every field has a default, so a config file
/// only needs to list what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub seed: u64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub augment_prob: f64,
    pub blur_sigma_max: f64,
    pub jpeg_quality_min: u8,
    pub adam: AdamConfig,
    /// Adapter settings; `use_adapters = false` trains without them.
    pub lora: LoraConfig,
    pub use_adapters: bool,
    /// Bank bin width.
    pub delta: f64,
    pub anchor: AnchorPolicy,
    /// Stratified bank when true, uniformly drawn bank of equal size otherwise.
    pub use_sts: bool,
    /// Real training images feeding the bank; all of them when unset.
    pub bank_images: Option<usize>,
    pub backbone: BackboneConfig,
    pub enhancer: EnhancerConfig,
    pub use_enhancer: bool,
    pub orientation: Orientation,
    /// Residual connection inside each reconstruction block.
    pub cfdl_residual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            lambda1: 1.0 / 9.0,
            lambda2: 1.0 / 3.0,
            margin: 8.0,
            seed: 46,
            max_epochs: 10,
            early_stop_patience: 5,
            augment_prob: 0.5,
            blur_sigma_max: 3.0,
            jpeg_quality_min: 30,
            adam: AdamConfig::default(),
            lora: LoraConfig::default(),
            use_adapters: true,
            delta: 1e-3,
            anchor: AnchorPolicy::MeanNearest,
            use_sts: true,
            bank_images: None,
            backbone: BackboneConfig::tiny(46),
            enhancer: EnhancerConfig::tiny(),
            use_enhancer: true,
            orientation: Orientation::TokensAsKv,
            cfdl_residual: false,
        }
    }
}

impl TrainConfig {
    /// Reads TOML or JSON, chosen by extension (TOML when unknown).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(config_err(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be ≥ 0");
        }
        if !(self.margin > 0.0) {
            return bad("triplet margin must be positive");
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("max_epochs and early_stop_patience must be positive");
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad("augment_prob must lie in [0, 1]");
        }
        if !(self.blur_sigma_max >= 0.0) || !(1..=100).contains(&self.jpeg_quality_min) {
            return bad("augmentation ranges are invalid");
        }
        if self.bank_images == Some(0) {
            return bad("bank_images must be positive when set");
        }
        self.sts().bins()?;
        self.backbone.validate()?;
        self.enhancer.validate()?;
        if self.use_adapters {
            self.lora.validate(self.backbone.embed_dim)?;
        }
        Ok(())
    }

    pub fn sts(&self) -> StsConfig {
        StsConfig {
            delta: self.delta,
            seed: self.seed,
            anchor: self.anchor.clone(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            lora: self.use_adapters.then(|| self.lora.clone()),
            orientation: self.orientation,
            cfdl_residual: self.cfdl_residual,
            enhancer: self.enhancer.clone(),
            use_enhancer: self.use_enhancer,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
