//! Vision-transformer feature extractor.
//!
//! [`FrozenBackbone`] is a CLIP-style ViT (patch embedding, class token,
//! pre-norm blocks, final norm) whose weights never receive gradients. It is
//! either loaded from a tensor archive or generated from a seed at tiny
//! scale. [`AdaptedBackbone`] adds trainable low-rank factors to selected
//! attention projections.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{tensors_digest, TensorArchive};
use crate::datasets::Image;
use crate::error::{config_err, shape_err, Result, SddError};
use crate::nn::{attend, matmul_last, merge_heads, split_heads, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneSource {
    /// Tensor archive with pretrained weights.
    Archive { path: PathBuf },
    /// Deterministic random weights.
    SeededTiny { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub source: BackboneSource,
}

fn default_mlp_ratio() -> usize {
    4
}

impl BackboneConfig {
    /// 64 px images, 8 px patches, 2 blocks, 4 heads, 32-dim tokens.
    pub fn tiny(seed: u64) -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 2,
            heads: 4,
            embed_dim: 32,
            mlp_ratio: 4,
            source: BackboneSource::SeededTiny { seed },
        }
    }

    /// CLIP ViT-L/14 shapes at 224 px; weights must come from an archive.
    pub fn vit_l14(path: PathBuf) -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            depth: 24,
            heads: 16,
            embed_dim: 1024,
            mlp_ratio: 4,
            source: BackboneSource::Archive { path },
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count `N = (image_size / patch_size)²` (class token excluded).
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(config_err(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(config_err(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(config_err("depth and mlp ratio must be positive"));
        }
        Ok(())
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let m = self.mlp_ratio * d;
        let mut s = BTreeMap::new();
        s.insert("patch_embed.weight".to_string(), vec![d, 3, p, p]);
        s.insert("cls_token".to_string(), vec![d]);
        s.insert("pos_embed".to_string(), vec![self.num_tokens() + 1, d]);
        for ln in ["ln_pre", "ln_post"] {
            s.insert(format!("{ln}.weight"), vec![d]);
            s.insert(format!("{ln}.bias"), vec![d]);
        }
        for i in 0..self.depth {
            for ln in ["ln_1", "ln_2"] {
                s.insert(format!("blocks.{i}.{ln}.weight"), vec![d]);
                s.insert(format!("blocks.{i}.{ln}.bias"), vec![d]);
            }
            for proj in Projection::ALL {
                s.insert(format!("blocks.{i}.attn.{}.weight", proj.archive_name()), vec![d, d]);
                s.insert(format!("blocks.{i}.attn.{}.bias", proj.archive_name()), vec![d]);
            }
            s.insert(format!("blocks.{i}.mlp.fc1.weight"), vec![m, d]);
            s.insert(format!("blocks.{i}.mlp.fc1.bias"), vec![m]);
            s.insert(format!("blocks.{i}.mlp.fc2.weight"), vec![d, m]);
            s.insert(format!("blocks.{i}.mlp.fc2.bias"), vec![d]);
        }
        s
    }
}

/// Per-channel normalization applied before the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Attention projection that can carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    fn archive_name(self) -> &'static str {
        match self {
            Projection::Query => "q_proj",
            Projection::Key => "k_proj",
            Projection::Value => "v_proj",
            Projection::Output => "out_proj",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

/// Patch tokens (`n × d`, row-major) and the class-token vector of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub n: usize,
    pub d: usize,
    pub patches: Vec<f32>,
    pub cls: Vec<f32>,
}

impl TokenFeatures {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.patches[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.patches.chunks_exact(self.d)
    }
}

/// A batch of images as a `(B, 3, H, W)` tensor with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
}

impl ImageBatch {
    pub fn from_images(images: &[&Image], device: &Device, dtype: DType) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| shape_err("empty image batch"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            if img.width != w || img.height != h {
                return Err(shape_err("images in a batch must share one size"));
            }
            data.extend_from_slice(&img.data);
        }
        let pixels = Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?;
        Ok(Self { pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_1: LayerNorm,
    proj: [Linear; 4],
    ln_2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Frozen encoder. Cheap to share behind an `Arc`; inference takes `&self`.
#[derive(Debug)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    preprocessing: Preprocessing,
    tensors: BTreeMap<String, Tensor>,
    patch_embed: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    device: Device,
    dtype: DType,
}

fn seeded_tensors(cfg: &BackboneConfig, seed: u64) -> Result<BTreeMap<String, Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut rng, DType::F32, &Device::Cpu);
    let mut out = BTreeMap::new();
    for (name, shape) in cfg.expected_shapes() {
        let t = if name.ends_with(".bias") {
            init.constant(&shape, 0.0)?
        } else if name.starts_with("ln_") || name.contains(".ln_") {
            init.constant(&shape, 1.0)?
        } else if name == "pos_embed" {
            init.normal(&shape, 0.02)?
        } else if name == "cls_token" {
            init.normal(&shape, 1.0 / (cfg.embed_dim as f64).sqrt())?
        } else {
            let fan_in: usize = shape[1..].iter().product();
            init.uniform(&shape, (3.0 / fan_in as f64).sqrt())?
        };
        out.insert(name, t);
    }
    Ok(out)
}

impl FrozenBackbone {
    pub fn load(config: &BackboneConfig, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        match &config.source {
            BackboneSource::SeededTiny { seed } => {
                let tensors = seeded_tensors(config, *seed)?;
                Self::from_tensors(config.clone(), Preprocessing::default(), tensors, device, dtype)
            }
            BackboneSource::Archive { path } => {
                let archive = TensorArchive::load(path, device)?;
                Self::from_archive(config, &archive, device, dtype)
            }
        }
    }

    pub fn from_archive(
        config: &BackboneConfig,
        archive: &TensorArchive,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let mut preprocessing = Preprocessing::default();
        for (key, slot) in [
            ("sdd.preprocess.mean", &mut preprocessing.mean),
            ("sdd.preprocess.std", &mut preprocessing.std),
        ] {
            if let Some(v) = archive.metadata.get(key) {
                *slot = serde_json::from_str(v).map_err(|e| SddError::Load {
                    tensor: key.to_string(),
                    reason: e.to_string(),
                })?;
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.expected_shapes() {
            let t = archive.get(&name)?;
            if t.dims() != shape.as_slice() {
                return Err(config_err(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.dims(),
                    shape
                )));
            }
            tensors.insert(name, t.clone());
        }
        Self::from_tensors(config.clone(), preprocessing, tensors, device, dtype)
    }

    fn from_tensors(
        config: BackboneConfig,
        preprocessing: Preprocessing,
        tensors: BTreeMap<String, Tensor>,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let tensors: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, t.to_device(device)?.to_dtype(dtype)?.detach())))
            .collect::<Result<_>>()?;
        let get = |name: &str| -> Result<Tensor> {
            tensors.get(name).cloned().ok_or_else(|| SddError::Load {
                tensor: name.to_string(),
                reason: "missing".into(),
            })
        };
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm::new(get(&format!("{prefix}.weight"))?, get(&format!("{prefix}.bias"))?))
        };
        let lin = |prefix: &str| -> Result<Linear> {
            Ok(Linear::new(
                get(&format!("{prefix}.weight"))?,
                Some(get(&format!("{prefix}.bias"))?),
            ))
        };
        let blocks = (0..config.depth)
            .map(|i| {
                let proj = Projection::ALL
                    .map(|p| lin(&format!("blocks.{i}.attn.{}", p.archive_name())));
                let [q, k, v, o] = proj;
                Ok(Block {
                    ln_1: ln(&format!("blocks.{i}.ln_1"))?,
                    proj: [q?, k?, v?, o?],
                    ln_2: ln(&format!("blocks.{i}.ln_2"))?,
                    fc1: lin(&format!("blocks.{i}.mlp.fc1"))?,
                    fc2: lin(&format!("blocks.{i}.mlp.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: get("patch_embed.weight")?,
            cls_token: get("cls_token")?,
            pos_embed: get("pos_embed")?,
            ln_pre: ln("ln_pre")?,
            ln_post: ln("ln_post")?,
            blocks,
            config,
            preprocessing,
            tensors,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Exports weights and preprocessing constants in archive form.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for (k, t) in &self.tensors {
            a.insert(k.clone(), t.to_dtype(DType::F32)?);
        }
        a.metadata.insert(
            "sdd.preprocess.mean".into(),
            serde_json::to_string(&self.preprocessing.mean)?,
        );
        a.metadata.insert(
            "sdd.preprocess.std".into(),
            serde_json::to_string(&self.preprocessing.std)?,
        );
        Ok(a)
    }

    /// Digest of every frozen weight; unchanged by any amount of training.
    pub fn checksum(&self) -> Result<String> {
        tensors_digest(self.tensors.iter())
    }

    /// `(x − mean) / std` per channel.
    pub fn normalize(&self, pixels: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = pixels.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(shape_err(format!(
                "expected images of shape 3×{s}×{s}, got {c}×{h}×{w}"
            )));
        }
        let mean = Tensor::new(&self.preprocessing.mean, &self.device)?
            .to_dtype(pixels.dtype())?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.preprocessing.std, &self.device)?
            .to_dtype(pixels.dtype())?
            .reshape((1, 3, 1, 1))?;
        Ok(pixels.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Frozen forward pass over normalized pixels; returns `(patches, cls)`
    /// shaped `(B, N, D)` and `(B, D)`.
    pub fn forward(&self, normalized: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_with(normalized, None, None)
    }

    fn forward_with(
        &self,
        normalized: &Tensor,
        adapters: Option<&AdapterState>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let b = normalized.dims()[0];
        let d = cfg.embed_dim;
        let patches = normalized
            .conv2d(&self.patch_embed, 0, cfg.patch_size, 1, 1)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        let cls = self.cls_token.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &patches], 1)?
            .broadcast_add(&self.pos_embed.unsqueeze(0)?)?;
        x = self.ln_pre.forward(&x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let h = block.ln_1.forward(&x)?;
            let project = |p: Projection, input: &Tensor, rng: Option<&mut ChaCha8Rng>| -> Result<Tensor> {
                let base = block.proj[p as usize].forward(input)?;
                match adapters.and_then(|a| a.factors.get(&(i, p)).map(|f| (a, f))) {
                    Some((state, (fa, fb))) => {
                        let x_in = match rng {
                            Some(rng) if state.config.dropout > 0.0 => {
                                dropout(input, state.config.dropout, rng)?
                            }
                            _ => input.clone(),
                        };
                        let delta = matmul_last(&matmul_last(&x_in, fa)?, fb)?;
                        Ok((base + (delta * state.config.scale())?)?)
                    }
                    None => Ok(base),
                }
            };
            let q = project(Projection::Query, &h, rng.as_deref_mut())?;
            let k = project(Projection::Key, &h, rng.as_deref_mut())?;
            let v = project(Projection::Value, &h, rng.as_deref_mut())?;
            let heads = cfg.heads;
            let scale = 1.0 / ((d / heads) as f64).sqrt();
            let (att, _) = attend(
                &split_heads(&q, heads)?,
                &split_heads(&k, heads)?,
                &split_heads(&v, heads)?,
                scale,
            )?;
            let att = merge_heads(&att)?;
            let o = project(Projection::Output, &att, rng.as_deref_mut())?;
            x = (x + o)?;
            let h = block.ln_2.forward(&x)?;
            let m = block.fc2.forward(&block.fc1.forward(&h)?.gelu_erf()?)?;
            x = (x + m)?;
        }
        let x = self.ln_post.forward(&x)?;
        let n = cfg.num_tokens();
        let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
        let patches = x.narrow(1, 1, n)?;
        Ok((patches, cls))
    }

    /// Encodes a batch into per-image token features (evaluation mode).
    pub fn encode(&self, batch: &ImageBatch) -> Result<Vec<TokenFeatures>> {
        let x = self.normalize(&batch.pixels.to_dtype(self.dtype)?)?;
        let (patches, cls) = self.forward(&x)?;
        split_features(&patches, &cls)
    }
}

pub(crate) fn split_features(patches: &Tensor, cls: &Tensor) -> Result<Vec<TokenFeatures>> {
    let (b, n, d) = patches.dims3()?;
    let p = patches.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let c = cls.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| TokenFeatures {
            n,
            d,
            patches: p[i * n * d..(i + 1) * n * d].to_vec(),
            cls: c[i * d..(i + 1) * d].to_vec(),
        })
        .collect())
}

/// Inverted dropout with a mask drawn from `rng`.
fn dropout(x: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 6,
            alpha: 6.0,
            dropout: 0.8,
            targets: vec![Projection::Query, Projection::Value],
        }
    }
}

impl LoraConfig {
    /// Multiplier on the low-rank path, `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err("adapter rank must be ≥ 1"));
        }
        if self.rank > embed_dim {
            return Err(config_err(format!(
                "adapter rank {} exceeds embedding dimension {embed_dim}",
                self.rank
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!(
                "adapter dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Low-rank factor pairs `(A: D×r, B: r×D)` keyed by `(block, projection)`.
#[derive(Debug, Clone)]
pub struct AdapterState {
    pub config: LoraConfig,
    pub factors: BTreeMap<(usize, Projection), (Tensor, Tensor)>,
    pub trainable: bool,
}

/// Frozen backbone plus trainable adapters.
#[derive(Debug, Clone)]
pub struct AdaptedBackbone {
    base: Arc<FrozenBackbone>,
    adapters: AdapterState,
}

/// Attaches adapters to every block's target projections, registering the
/// factors in `store` under `lora.blocks.<i>.<q|k|v|o>.{a,b}`. `B` starts at
/// zero so the adapted encoder initially reproduces the frozen one.
pub fn attach_adapters(
    base: Arc<FrozenBackbone>,
    cfg: &LoraConfig,
    init: &mut Init,
    store: &mut ParamStore,
) -> Result<AdaptedBackbone> {
    let d = base.config.embed_dim;
    cfg.validate(d)?;
    let mut targets = cfg.targets.clone();
    targets.sort();
    targets.dedup();
    let mut factors = BTreeMap::new();
    for i in 0..base.config.depth {
        for &p in &targets {
            let prefix = format!("lora.blocks.{i}.{}", p.short());
            let a = init.uniform(&[d, cfg.rank], 1.0 / (d as f64).sqrt())?;
            let a = init.trainable(store, &format!("{prefix}.a"), a)?;
            let b = init.constant(&[cfg.rank, d], 0.0)?;
            let b = init.trainable(store, &format!("{prefix}.b"), b)?;
            factors.insert((i, p), (a, b));
        }
    }
    Ok(AdaptedBackbone {
        base,
        adapters: AdapterState {
            config: cfg.clone(),
            factors,
            trainable: true,
        },
    })
}

impl AdaptedBackbone {
    pub fn base(&self) -> &Arc<FrozenBackbone> {
        &self.base
    }

    pub fn adapters(&self) -> &AdapterState {
        &self.adapters
    }

    /// Forward over normalized pixels. With `rng` the adapter path is in
    /// training mode (dropout active).
    pub fn forward(&self, normalized: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Tensor)> {
        self.base.forward_with(normalized, Some(&self.adapters), rng)
    }

    pub fn encode(&self, batch: &ImageBatch) -> Result<Vec<TokenFeatures>> {
        let x = self.base.normalize(&batch.pixels.to_dtype(self.base.dtype)?)?;
        let (patches, cls) = self.forward(&x, None)?;
        split_features(&patches, &cls)
    }
}
