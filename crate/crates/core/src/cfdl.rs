//! Token-bank reconstruction of patch features.
//!
//! Four attention blocks (two encoder, two decoder) rebuild the adapted
//! patch tokens `V_H` with the token bank as context. Each block is
//! `LN(MHA(q, k, v))` with no residual and no feed-forward layer, unless the
//! residual variant `LN(q + MHA(q, k, v))` is switched on. The
//! per-token gap between the reconstruction and `V_H` is the difference map
//! consumed by the enhancer.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{abs_zero_subgradient, attend, expand_batch, merge_heads, split_heads, Init, LayerNorm, Linear, ParamStore};

/// Which side of each encoder block supplies the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Patch tokens query the bank; outputs keep `V_H`'s token count.
    #[default]
    TokensAsKv,
    /// Bank rows query the patch tokens; outputs have one row per bank
    /// token, and loss and difference use token-mean pooled vectors.
    Literal,
}

/// `LN(MHA(q, k, v))` with bias-free projections, or `LN(q + MHA(q, k, v))`
/// when `residual` is set.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln: LayerNorm,
    pub heads: usize,
    pub residual: bool,
}

impl AttentionBlock {
    pub fn init(init: &mut Init, store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err(format!("dimension {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::init(init, store, &format!("{name}.wq"), dim, dim, false)?,
            wk: Linear::init(init, store, &format!("{name}.wk"), dim, dim, false)?,
            wv: Linear::init(init, store, &format!("{name}.wv"), dim, dim, false)?,
            wo: Linear::init(init, store, &format!("{name}.wo"), dim, dim, false)?,
            ln: LayerNorm::init(init, store, &format!("{name}.ln"), dim)?,
            heads,
            residual: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.in_dim()
    }

    /// Multi-head attention over `(B, T, D)` inputs. Scores are scaled by
    /// `1/√d_head`. Returns the output and the `(B, heads, Tq, Tk)` weights.
    pub fn mha(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, tk, _) = k.dims3()?;
        let (_, tv, _) = v.dims3()?;
        if tk != tv {
            return Err(shape_err(format!("keys have {tk} rows, values {tv}")));
        }
        let d = self.dim();
        for t in [q, k, v] {
            if t.dims3()?.2 != d {
                return Err(shape_err(format!("expected {d} columns, got {}", t.dims3()?.2)));
            }
        }
        let qh = split_heads(&self.wq.forward(q)?, self.heads)?;
        let kh = split_heads(&self.wk.forward(k)?, self.heads)?;
        let vh = split_heads(&self.wv.forward(v)?, self.heads)?;
        let (out, probs) = attend(&qh, &kh, &vh, 1.0 / ((d / self.heads) as f64).sqrt())?;
        Ok((self.wo.forward(&merge_heads(&out)?)?, probs))
    }

    pub fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let (out, _) = self.mha(q, kv, kv)?;
        if self.residual {
            self.ln.forward(&(out + q)?)
        } else {
            self.ln.forward(&out)
        }
    }
}

/// Intermediate and final reconstructions for one batch.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub r1: Tensor,
    pub r2: Tensor,
    pub r3: Tensor,
    pub re: Tensor,
}

#[derive(Debug, Clone)]
pub struct Cfdl {
    pub enc1: AttentionBlock,
    pub enc2: AttentionBlock,
    pub dec1: AttentionBlock,
    pub dec2: AttentionBlock,
    bank: Tensor,
    pub orientation: Orientation,
}

impl Cfdl {
    /// Registers parameters as `<name>.{enc1,enc2,dec1,dec2}.*`. The bank is
    /// a `(K, D)` tensor and is never trained.
    pub fn init(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        bank: Tensor,
        heads: usize,
        orientation: Orientation,
    ) -> Result<Self> {
        let (k, dim) = bank.dims2()?;
        if k == 0 {
            return Err(config_err("token bank must hold at least one row"));
        }
        let bank = bank.to_dtype(init.dtype())?.detach();
        Ok(Self {
            enc1: AttentionBlock::init(init, store, &format!("{name}.enc1"), dim, heads)?,
            enc2: AttentionBlock::init(init, store, &format!("{name}.enc2"), dim, heads)?,
            dec1: AttentionBlock::init(init, store, &format!("{name}.dec1"), dim, heads)?,
            dec2: AttentionBlock::init(init, store, &format!("{name}.dec2"), dim, heads)?,
            bank,
            orientation,
        })
    }

    /// Switches every block to `LN(q + MHA(q, k, v))`.
    pub fn with_residual(mut self, on: bool) -> Self {
        for b in [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2] {
            b.residual = on;
        }
        self
    }

    pub fn residual(&self) -> bool {
        self.enc1.residual
    }

    pub fn bank(&self) -> &Tensor {
        &self.bank
    }

    pub fn dim(&self) -> usize {
        self.enc1.dim()
    }

    /// Reconstructs `(B, N, D)` patch tokens.
    pub fn forward(&self, v_h: &Tensor) -> Result<Reconstruction> {
        let (b, _, d) = v_h.dims3()?;
        if d != self.dim() {
            return Err(shape_err(format!(
                "patch tokens have {d} columns, bank has {}",
                self.dim()
            )));
        }
        let bank = expand_batch(&self.bank, b)?;
        let (r1, r2) = match self.orientation {
            Orientation::TokensAsKv => {
                let r1 = self.enc1.forward(v_h, &bank)?;
                let r2 = self.enc2.forward(&r1, &bank)?;
                (r1, r2)
            }
            Orientation::Literal => {
                let r1 = self.enc1.forward(&bank, v_h)?;
                let r2 = self.enc2.forward(&r1, v_h)?;
                (r1, r2)
            }
        };
        let r3 = self.dec1.forward(&r2, &r2)?;
        let re = self.dec2.forward(&r1, &r3)?;
        Ok(Reconstruction { r1, r2, r3, re })
    }

    /// Reconstruction loss on real samples only.
    pub fn loss(&self, rec: &Reconstruction, v_h: &Tensor, real_mask: &[bool]) -> Result<Tensor> {
        match self.orientation {
            Orientation::TokensAsKv => reconstruction_loss(&rec.re, v_h, real_mask),
            Orientation::Literal => reconstruction_loss(
                &rec.re.mean_keepdim(1)?,
                &v_h.mean_keepdim(1)?,
                real_mask,
            ),
        }
    }

    /// `|R_e − V_H|`, shaped like `V_H`.
    pub fn difference(&self, rec: &Reconstruction, v_h: &Tensor) -> Result<Tensor> {
        match self.orientation {
            Orientation::TokensAsKv => difference_map(&rec.re, v_h),
            Orientation::Literal => {
                let pooled = difference_map(&rec.re.mean_keepdim(1)?, &v_h.mean_keepdim(1)?)?;
                Ok(pooled.broadcast_as(v_h.dims())?.contiguous()?)
            }
        }
    }
}

/// Per-sample MSE over tokens × dims, averaged over the samples flagged real.
/// Exactly zero, with zero gradient, when no sample is real.
pub fn reconstruction_loss(re: &Tensor, v_h: &Tensor, real_mask: &[bool]) -> Result<Tensor> {
    if re.dims() != v_h.dims() {
        return Err(shape_err(format!(
            "reconstruction {:?} vs features {:?}",
            re.dims(),
            v_h.dims()
        )));
    }
    let b = re.dims()[0];
    if real_mask.len() != b {
        return Err(shape_err(format!("mask has {} entries for batch {b}", real_mask.len())));
    }
    let per_sample = (re - v_h)?.sqr()?.flatten_from(1)?.mean(D::Minus1)?;
    let mask: Vec<f64> = real_mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let n_real = real_mask.iter().filter(|m| **m).count().max(1);
    let mask = Tensor::from_vec(mask, b, re.device())?.to_dtype(re.dtype())?;
    Ok(((per_sample * mask)?.sum_all()? / n_real as f64)?)
}

/// Elementwise `|R_e − V_H|` with a zero subgradient at equality.
pub fn difference_map(re: &Tensor, v_h: &Tensor) -> Result<Tensor> {
    if re.dims() != v_h.dims() {
        return Err(shape_err(format!(
            "reconstruction {:?} vs features {:?}",
            re.dims(),
            v_h.dims()
        )));
    }
    abs_zero_subgradient(&(re - v_h)?)
}

pub(crate) fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
