use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optimizer::Adam;
use crate::archive::TensorArchive;
use crate::error::{Result, SddError};
use crate::model::SddModel;

pub const CHECKPOINT_FORMAT: &str = "sdd-checkpoint/1";

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    /// Completed epochs.
    pub epoch: usize,
    pub val_metric: f64,
    pub adam_step: u64,
    pub config: TrainConfig,
    pub bank_digest: String,
    pub backbone_checksum: String,
}

/// Trainable parameters, batch-norm buffers and optimizer moments plus a
/// JSON sidecar with bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub optim_m: BTreeMap<String, Tensor>,
    pub optim_v: BTreeMap<String, Tensor>,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn capture(
        model: &SddModel,
        adam: &Adam,
        epoch: usize,
        val_metric: f64,
        config: &TrainConfig,
        bank_digest: &str,
    ) -> Result<Self> {
        Ok(Self {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.into(),
                epoch,
                val_metric,
                adam_step: adam.step,
                config: config.clone(),
                bank_digest: bank_digest.to_string(),
                backbone_checksum: model.frozen().checksum()?,
            },
            params: model.params().snapshot()?,
            buffers: model
                .buffers()
                .into_iter()
                .map(|(k, t)| Ok((k, t.copy()?)))
                .collect::<Result<_>>()?,
            optim_m: adam.m.clone(),
            optim_v: adam.v.clone(),
        })
    }

    /// Writes the tensor archive to `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = TensorArchive::new();
        for (k, t) in self.params.iter().chain(&self.buffers) {
            a.insert(k.clone(), t.clone());
        }
        for (k, t) in &self.optim_m {
            a.insert(format!("{OPTIM_M}{k}"), t.clone());
        }
        for (k, t) in &self.optim_v {
            a.insert(format!("{OPTIM_V}{k}"), t.clone());
        }
        a.metadata.insert("sdd.format".into(), CHECKPOINT_FORMAT.into());
        a.save(path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&side, json).map_err(|e| SddError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| SddError::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(SddError::CheckpointMismatch(format!(
                "unknown checkpoint format `{}`",
                meta.format
            )));
        }
        let archive = TensorArchive::load(path, &Device::Cpu)?;
        let mut ck = Self {
            meta,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            optim_m: BTreeMap::new(),
            optim_v: BTreeMap::new(),
        };
        for (k, t) in archive.tensors {
            if let Some(rest) = k.strip_prefix(OPTIM_M) {
                ck.optim_m.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix(OPTIM_V) {
                ck.optim_v.insert(rest.to_string(), t);
            } else if k.ends_with(".running_mean") || k.ends_with(".running_var") {
                ck.buffers.insert(k, t);
            } else {
                ck.params.insert(k, t);
            }
        }
        Ok(ck)
    }

    /// Refuses a checkpoint built against another bank unless `force`;
    /// warns when the configuration differs.
    pub fn check_compat(&self, config: &TrainConfig, bank_digest: &str, force: bool) -> Result<()> {
        if self.meta.bank_digest != bank_digest {
            let msg = format!(
                "checkpoint was trained with bank {}, current bank is {}",
                self.meta.bank_digest, bank_digest
            );
            if !force {
                return Err(SddError::CheckpointMismatch(msg));
            }
            log::warn!("{msg} (forced)");
        }
        if &self.meta.config != config {
            log::warn!("checkpoint config differs from the current config");
        }
        Ok(())
    }

    /// Loads parameters and buffers into `model`.
    pub fn apply(&self, model: &SddModel) -> Result<()> {
        model.params().restore(&self.params)?;
        model.set_buffers(&self.buffers)
    }

    /// Rebuilds optimizer state.
    pub fn optimizer(&self) -> Result<Adam> {
        let c = &self.meta.config;
        let mut adam = Adam::new(c.lr, c.adam)?;
        adam.step = self.meta.adam_step;
        adam.m = self.optim_m.clone();
        adam.v = self.optim_v.clone();
        Ok(adam)
    }
}
