//! The assembled detector: adapted backbone, reconstruction module,
//! enhancer and head.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::tensors_digest;
use crate::backbone::{attach_adapters, split_features, AdaptedBackbone, BackboneConfig, FrozenBackbone, ImageBatch, LoraConfig, TokenFeatures};
use crate::cfdl::{Cfdl, Orientation, Reconstruction};
use crate::datasets::Image;
use crate::enhancer::{sigmoid, ClassifierHead, Enhancer, EnhancerConfig, StagePyramid};
use crate::error::{config_err, Result};
use crate::nn::{Init, ParamStore};
use crate::sts::TokenBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` keeps the encoder fully frozen.
    pub lora: Option<LoraConfig>,
    pub orientation: Orientation,
    #[serde(default)]
    pub cfdl_residual: bool,
    pub enhancer: EnhancerConfig,
    pub use_enhancer: bool,
}

impl ModelConfig {
    pub fn tiny(seed: u64) -> Self {
        Self {
            backbone: BackboneConfig::tiny(seed),
            lora: Some(LoraConfig::default()),
            orientation: Orientation::TokensAsKv,
            cfdl_residual: false,
            enhancer: EnhancerConfig::tiny(),
            use_enhancer: true,
        }
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B,)` logits, fake being the positive class.
    pub logits: Tensor,
    pub v_h: Tensor,
    pub cls: Tensor,
    pub rec: Reconstruction,
    pub diff: Tensor,
    pub pyramid: Option<StagePyramid>,
}

#[derive(Debug)]
pub struct SddModel {
    config: ModelConfig,
    frozen: Arc<FrozenBackbone>,
    adapted: Option<AdaptedBackbone>,
    pub cfdl: Cfdl,
    pub enhancer: Option<Enhancer>,
    pub head: ClassifierHead,
    params: ParamStore,
}

impl SddModel {
    /// Builds the trainable parts with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, frozen: Arc<FrozenBackbone>, bank: &TokenBank, seed: u64) -> Result<Self> {
        let bb = frozen.config().clone();
        if bank.dim != bb.embed_dim {
            return Err(config_err(format!(
                "bank tokens are {}-dim, backbone emits {}-dim tokens",
                bank.dim, bb.embed_dim
            )));
        }
        let device = frozen.device().clone();
        let dtype = frozen.dtype();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut init = Init::new(&mut rng, dtype, &device);
        let mut params = ParamStore::new();
        let adapted = match &config.lora {
            Some(l) => Some(attach_adapters(frozen.clone(), l, &mut init, &mut params)?),
            None => None,
        };
        let cfdl = Cfdl::init(
            &mut init,
            &mut params,
            "cfdl",
            bank.to_tensor(&device, dtype)?,
            bb.heads,
            config.orientation,
        )?
        .with_residual(config.cfdl_residual);
        let enhancer = if config.use_enhancer {
            Some(Enhancer::init(
                &mut init,
                &mut params,
                "enhancer",
                &config.enhancer,
                bb.image_size,
                bb.grid(),
                bb.embed_dim,
            )?)
        } else {
            None
        };
        let head_in = bb.embed_dim + if config.use_enhancer { config.enhancer.pooled_dim } else { 0 };
        let head = ClassifierHead::init(&mut init, &mut params, "head", head_in)?;
        Ok(Self {
            config,
            frozen,
            adapted,
            cfdl,
            enhancer,
            head,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn frozen(&self) -> &Arc<FrozenBackbone> {
        &self.frozen
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.frozen.device()
    }

    pub fn dtype(&self) -> DType {
        self.frozen.dtype()
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> BTreeMap<String, Tensor> {
        self.enhancer
            .as_ref()
            .map(|e| e.buffers("enhancer").into_iter().collect())
            .unwrap_or_default()
    }

    pub fn set_buffers(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some(e) = &self.enhancer {
            for name in e.buffers("enhancer").into_iter().map(|(k, _)| k) {
                let v = values.get(&name).ok_or_else(|| crate::SddError::Load {
                    tensor: name.clone(),
                    reason: "missing from archive".into(),
                })?;
                e.set_buffer("enhancer", &name, v)?;
            }
        }
        Ok(())
    }

    /// Digest of all parameters and buffers.
    pub fn digest(&self) -> Result<String> {
        let mut all = self.params.snapshot()?;
        all.extend(self.buffers());
        tensors_digest(all.iter())
    }

    fn encode_tensor(&self, normalized: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Tensor)> {
        match &self.adapted {
            Some(a) => a.forward(normalized, rng),
            None => self.frozen.forward(normalized),
        }
    }

    /// Forward over `(B, 3, H, W)` pixels in `[0, 1]`. Passing `rng`
    /// selects training mode: adapter dropout and batch statistics.
    pub fn forward(&self, pixels: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        let train = rng.is_some();
        let x = self.frozen.normalize(&pixels.to_dtype(self.dtype())?)?;
        let (v_h, cls) = self.encode_tensor(&x, rng)?;
        let rec = self.cfdl.forward(&v_h)?;
        let diff = self.cfdl.difference(&rec, &v_h)?;
        let pyramid = match &self.enhancer {
            Some(e) => Some(e.forward(&x, &diff, train)?),
            None => None,
        };
        let logits = self.head.forward(pyramid.as_ref().map(|p| &p.pooled), &cls)?;
        Ok(ForwardOutput {
            logits,
            v_h,
            cls,
            rec,
            diff,
            pyramid,
        })
    }

    /// Evaluation-mode logits for a list of images.
    pub fn logits(&self, images: &[&Image], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let batch = ImageBatch::from_images(chunk, self.device(), self.dtype())?;
            let l = self.forward(&batch.pixels, None)?.logits;
            out.extend(l.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// Fake-ness probabilities.
    pub fn scores(&self, images: &[&Image], batch_size: usize) -> Result<Vec<f64>> {
        Ok(self.logits(images, batch_size)?.into_iter().map(sigmoid).collect())
    }

    /// Adapted-encoder token features in evaluation mode.
    pub fn encode(&self, images: &[&Image], batch_size: usize) -> Result<Vec<TokenFeatures>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            let batch = ImageBatch::from_images(chunk, self.device(), self.dtype())?;
            let x = self.frozen.normalize(&batch.pixels)?;
            let (p, c) = self.encode_tensor(&x, None)?;
            out.extend(split_features(&p, &c)?);
        }
        Ok(out)
    }
}
