//! Low-level feature enhancer and the classifier head.
//!
//! Three strided convolution stages extract maps `F(n)` from the image. The
//! difference map is projected onto each stage with a transposed
//! convolution `P(n)`, then
//!
//! ```text
//! F'(n)    = F(n) ⊙ P(n)
//! w(n)     = exp(−|F'(n) − F(n)|)
//! F_low(n) = F'(n) + F'(n) ⊙ w(n)
//! ```
//!
//! The deepest `F_low` is average-pooled, projected, and concatenated with
//! the class token before a linear head produces one logit.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datasets::Label;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{abs_zero_subgradient, BatchNorm2d, Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancerConfig {
    pub stage_channels: Vec<usize>,
    pub stage_stride: usize,
    pub pooled_dim: usize,
    /// Stop gradients through the adaptive weight.
    #[serde(default)]
    pub detach_weight: bool,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128],
            stage_stride: 2,
            pooled_dim: 128,
            detach_weight: false,
        }
    }
}

impl EnhancerConfig {
    pub fn tiny() -> Self {
        Self {
            stage_channels: vec![8, 16, 32],
            stage_stride: 2,
            pooled_dim: 32,
            detach_weight: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 3 || self.stage_channels.contains(&0) {
            return Err(config_err("the enhancer needs exactly 3 stages with nonzero channels"));
        }
        if self.stage_stride < 1 || self.pooled_dim == 0 {
            return Err(config_err("stage stride and pooled dim must be positive"));
        }
        Ok(())
    }

    /// Spatial side of each stage for a square input of side `image_size`.
    pub fn stage_sizes(&self, image_size: usize) -> Vec<usize> {
        let mut s = image_size;
        (0..3)
            .map(|_| {
                s = s.div_ceil(self.stage_stride);
                s
            })
            .collect()
    }
}

#[derive(Debug)]
struct Stage {
    conv: Tensor,
    bn: BatchNorm2d,
    deconv: Tensor,
    deconv_bias: Tensor,
    scale: usize,
}

#[derive(Debug)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    stages: Vec<Stage>,
    proj: Linear,
    grid: usize,
    token_dim: usize,
}

/// Per-stage maps from one forward pass.
#[derive(Debug, Clone)]
pub struct StagePyramid {
    pub features: Vec<Tensor>,
    pub projected: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    pub weights: Vec<Tensor>,
    pub low: Vec<Tensor>,
    /// `(B, pooled_dim)` projection of the pooled deepest `F_low`.
    pub pooled: Tensor,
}

impl Enhancer {
    /// Parameters live under `<name>.stages.<n>.*` and `<name>.proj.*`.
    /// `grid` is the token grid side and `token_dim` the token width.
    pub fn init(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        config: &EnhancerConfig,
        image_size: usize,
        grid: usize,
        token_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let sizes = config.stage_sizes(image_size);
        let mut stages = Vec::with_capacity(3);
        let mut c_in = 3;
        for (n, (&c, &side)) in config.stage_channels.iter().zip(&sizes).enumerate() {
            if side < grid || side % grid != 0 {
                return Err(config_err(format!(
                    "stage {} is {side}×{side}, not a multiple of the {grid}×{grid} token grid",
                    n + 1
                )));
            }
            let scale = side / grid;
            let prefix = format!("{name}.stages.{n}");
            let fan_in = (c_in * 9) as f64;
            let w = init.uniform(&[c, c_in, 3, 3], (6.0 / fan_in).sqrt())?;
            let conv = init.trainable(store, &format!("{prefix}.conv.weight"), w)?;
            let bn = BatchNorm2d::init(init, store, &format!("{prefix}.bn"), c)?;
            let dw = init.uniform(
                &[token_dim, c, scale, scale],
                1.0 / ((token_dim * scale * scale) as f64).sqrt(),
            )?;
            let deconv = init.trainable(store, &format!("{prefix}.deconv.weight"), dw)?;
            let db = init.constant(&[c], 1.0)?;
            let deconv_bias = init.trainable(store, &format!("{prefix}.deconv.bias"), db)?;
            stages.push(Stage {
                conv,
                bn,
                deconv,
                deconv_bias,
                scale,
            });
            c_in = c;
        }
        let proj = Linear::init(init, store, &format!("{name}.proj"), c_in, config.pooled_dim, true)?;
        Ok(Self {
            config: config.clone(),
            stages,
            proj,
            grid,
            token_dim,
        })
    }

    /// Batch-norm running statistics, named `<name>.stages.<n>.bn.running_{mean,var}`.
    pub fn buffers(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, s) in self.stages.iter().enumerate() {
            let (m, v) = s.bn.running_stats();
            out.push((format!("{name}.stages.{n}.bn.running_mean"), m));
            out.push((format!("{name}.stages.{n}.bn.running_var"), v));
        }
        out
    }

    pub fn set_buffer(&self, name: &str, key: &str, value: &Tensor) -> Result<bool> {
        for (n, s) in self.stages.iter().enumerate() {
            let base = format!("{name}.stages.{n}.bn.");
            if let Some(rest) = key.strip_prefix(&base) {
                let (m, v) = s.bn.running_stats();
                match rest {
                    "running_mean" => s.bn.set_running_stats(value.clone(), v)?,
                    "running_var" => s.bn.set_running_stats(m, value.clone())?,
                    _ => return Ok(false),
                }
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Convolution → batch norm → ReLU for each stage.
    pub fn run_stages(&self, image: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut x = image.clone();
        let mut out = Vec::with_capacity(3);
        for s in &self.stages {
            x = x.conv2d(&s.conv, 1, self.config.stage_stride, 1, 1)?;
            x = s.bn.forward(&x, train)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Reshapes `(B, N, D)` to a `(B, D, g, g)` grid and upsamples it with
    /// each stage's transposed convolution.
    pub fn project_difference(&self, d_s: &Tensor) -> Result<Vec<Tensor>> {
        let (b, n, d) = d_s.dims3()?;
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n {
            return Err(config_err(format!("{n} tokens do not form a square grid")));
        }
        if g != self.grid || d != self.token_dim {
            return Err(shape_err(format!(
                "difference map is {g}×{g}×{d}, enhancer expects {0}×{0}×{1}",
                self.grid, self.token_dim
            )));
        }
        let grid = d_s.transpose(1, 2)?.contiguous()?.reshape((b, d, g, g))?;
        self.stages
            .iter()
            .map(|s| {
                let y = grid.conv_transpose2d(&s.deconv, 0, 0, s.scale, 1)?;
                let c = s.deconv_bias.dims1()?;
                Ok(y.broadcast_add(&s.deconv_bias.reshape((1, c, 1, 1))?)?)
            })
            .collect()
    }

    pub fn forward(&self, image: &Tensor, d_s: &Tensor, train: bool) -> Result<StagePyramid> {
        let features = self.run_stages(image, train)?;
        let projected = self.project_difference(d_s)?;
        let mut fused = Vec::with_capacity(3);
        let mut weights = Vec::with_capacity(3);
        let mut low = Vec::with_capacity(3);
        for (f, p) in features.iter().zip(&projected) {
            let fp = fuse(f, p)?;
            let w = adaptive_weight(&fp, f, self.config.detach_weight)?;
            low.push(residual_attend(&fp, &w)?);
            fused.push(fp);
            weights.push(w);
        }
        let pooled = self.pool(&low[2])?;
        Ok(StagePyramid {
            features,
            projected,
            fused,
            weights,
            low,
            pooled,
        })
    }

    /// Global average pool of a `(B, C, H, W)` map followed by the projection.
    pub fn pool(&self, f_low: &Tensor) -> Result<Tensor> {
        let v = f_low.mean(D::Minus1)?.mean(D::Minus1)?;
        self.proj.forward(&v)
    }
}

/// `F ⊙ P`.
pub fn fuse(f: &Tensor, projected: &Tensor) -> Result<Tensor> {
    if f.dims() != projected.dims() {
        return Err(shape_err(format!(
            "cannot fuse {:?} with {:?}",
            f.dims(),
            projected.dims()
        )));
    }
    Ok(f.mul(projected)?)
}

/// `exp(−|F' − F|)`, optionally cut from the gradient graph.
pub fn adaptive_weight(fused: &Tensor, f: &Tensor, detach: bool) -> Result<Tensor> {
    let w = abs_zero_subgradient(&(fused - f)?)?.neg()?.exp()?;
    Ok(if detach { w.detach() } else { w })
}

/// `F' + F' ⊙ w`.
pub fn residual_attend(fused: &Tensor, weight: &Tensor) -> Result<Tensor> {
    Ok((fused + fused.mul(weight)?)?)
}

/// Linear classifier over `[pooled ‖ cls]`, or over `cls` alone when the
/// enhancer is disabled.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn init(init: &mut Init, store: &mut ParamStore, name: &str, in_dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::init(init, store, name, in_dim, 1, true)?,
        })
    }

    /// Returns `(B,)` logits.
    pub fn forward(&self, pooled: Option<&Tensor>, cls: &Tensor) -> Result<Tensor> {
        let x = match pooled {
            Some(p) => Tensor::cat(&[p, cls], D::Minus1)?,
            None => cls.clone(),
        };
        if x.dims2()?.1 != self.linear.in_dim() {
            return Err(config_err(format!(
                "head expects {} inputs, got {}",
                self.linear.in_dim(),
                x.dims2()?.1
            )));
        }
        Ok(self.linear.forward(&x)?.squeeze(1)?)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch-hard triplet loss over embeddings `(B, P)`: for each anchor the
/// farthest same-label sample and the nearest other-label sample. Zero when
/// the batch holds a single class. An anchor with no other same-label
/// sample uses itself as positive.
pub fn triplet_loss(emb: &Tensor, labels: &[Label], margin: f64) -> Result<Tensor> {
    let (b, _) = emb.dims2()?;
    if labels.len() != b {
        return Err(shape_err(format!("{} labels for batch {b}", labels.len())));
    }
    let has_both = labels.iter().any(|l| l.is_fake()) && labels.iter().any(|l| !l.is_fake());
    if !has_both {
        return Ok(emb.zeros_like()?.sum_all()?.detach());
    }
    let host: Vec<Vec<f64>> = emb
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .to_vec2::<f64>()?;
    let dist = |i: usize, j: usize| -> f64 {
        host[i].iter().zip(&host[j]).map(|(a, b)| (a - b).powi(2)).sum()
    };
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for a in 0..b {
        let mut p = (a, f64::NEG_INFINITY);
        let mut n = (a, f64::INFINITY);
        for j in 0..b {
            let d = dist(a, j);
            if labels[j] == labels[a] {
                if j != a && d > p.1 {
                    p = (j, d);
                }
            } else if d < n.1 {
                n = (j, d);
            }
        }
        pos.push(p.0 as u32);
        neg.push(n.0 as u32);
    }
    let dev = emb.device();
    let pos = Tensor::from_vec(pos, b, dev)?;
    let neg = Tensor::from_vec(neg, b, dev)?;
    let pair_dist = |idx: &Tensor| -> Result<Tensor> {
        let other = emb.index_select(idx, 0)?;
        Ok(((emb - other)?.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?)
    };
    let dp = pair_dist(&pos)?;
    let dn = pair_dist(&neg)?;
    Ok(((dp - dn)? + margin)?.relu()?.mean_all()?)
}
