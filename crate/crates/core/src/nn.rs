//! Small building blocks shared by every model component: a named parameter
//! store with seeded initialization, linear / layer-norm / batch-norm layers
//! and the multi-head attention used by both the backbone and the
//! reconstruction module.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};

use crate::error::{config_err, shape_err, Result};

/// Named trainable parameters, iterated in name order so that optimizer
/// updates and serialized archives are reproducible.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(config_err(format!("duplicate parameter name `{name}`")));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites parameter values in place. Every stored parameter must be
    /// present in `values` with a matching shape.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| crate::SddError::Load {
                    tensor: name.clone(),
                    reason: "missing from archive".into(),
                })?;
            if src.dims() != var.dims() {
                return Err(config_err(format!(
                    "parameter `{name}` has shape {:?}, archive holds {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Seeded parameter factory. Values are drawn in `f64` and cast, so a given
/// seed yields the same parameters for every dtype up to rounding.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, dtype: DType, device: &Device) -> Self {
        Self {
            rng,
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn from_values(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| config_err(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.from_values(values, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| config_err(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.from_values(values, shape)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.from_values(vec![value; n], shape)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    /// Registers `tensor` as a trainable variable and returns the tensor view
    /// that modules hold on to.
    pub fn trainable(&self, store: &mut ParamStore, name: &str, tensor: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        store.insert(name, var)?;
        Ok(t)
    }
}

/// `x · Wᵀ + b` over the last dimension, with `W` stored `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn init(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = init.uniform(&[out_dim, in_dim], bound)?;
        let weight = init.trainable(store, &format!("{name}.weight"), w)?;
        let bias = if bias {
            let b = init.constant(&[out_dim], 0.0)?;
            Some(init.trainable(store, &format!("{name}.bias"), b)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Multiplies the last dimension of `x` (any rank ≥ 2) by the 2-D matrix `w`.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (k, n) = w.dims2()?;
    let last = *dims.last().ok_or_else(|| shape_err("matmul on a scalar"))?;
    if last != k {
        return Err(shape_err(format!(
            "matmul: input has {last} features, weight expects {k}"
        )));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, k))?.matmul(w)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = n;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(gain: Tensor, bias: Tensor) -> Self {
        Self {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn init(init: &mut Init, store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let g = init.constant(&[dim], 1.0)?;
        let b = init.constant(&[dim], 0.0)?;
        let gain = init.trainable(store, &format!("{name}.weight"), g)?;
        let bias = init.trainable(store, &format!("{name}.bias"), b)?;
        Ok(Self::new(gain, bias))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over `(B, C, H, W)` with running statistics.
///
/// Running statistics are buffers, not parameters: they are updated in
/// training mode and never see gradients.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub gain: Tensor,
    pub bias: Tensor,
    running: Mutex<(Tensor, Tensor)>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn init(init: &mut Init, store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let g = init.constant(&[channels], 1.0)?;
        let b = init.constant(&[channels], 0.0)?;
        let gain = init.trainable(store, &format!("{name}.weight"), g)?;
        let bias = init.trainable(store, &format!("{name}.bias"), b)?;
        let mean = init.constant(&[channels], 0.0)?;
        let var = init.constant(&[channels], 1.0)?;
        Ok(Self {
            gain,
            bias,
            running: Mutex::new((mean, var)),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn running_stats(&self) -> (Tensor, Tensor) {
        self.running.lock().expect("batch-norm buffers poisoned").clone()
    }

    pub fn set_running_stats(&self, mean: Tensor, var: Tensor) -> Result<()> {
        let mut guard = self.running.lock().expect("batch-norm buffers poisoned");
        if mean.dims() != guard.0.dims() || var.dims() != guard.1.dims() {
            return Err(shape_err("batch-norm buffer shape mismatch"));
        }
        let dtype = guard.0.dtype();
        *guard = (mean.to_dtype(dtype)?, var.to_dtype(dtype)?);
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let count = x.elem_count() / c;
            let unbiased = if count > 1 {
                (var.detach().flatten_all()? * (count as f64 / (count as f64 - 1.0)))?
            } else {
                var.detach().flatten_all()?
            };
            let mut guard = self.running.lock().expect("batch-norm buffers poisoned");
            let m = self.momentum;
            let new_mean = ((&guard.0 * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((&guard.1 * (1.0 - m))? + (unbiased * m)?)?;
            *guard = (new_mean, new_var);
            (mean, var)
        } else {
            let guard = self.running.lock().expect("batch-norm buffers poisoned");
            (
                guard.0.reshape((1, c, 1, 1))?,
                guard.1.reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gain.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Numerically stable softmax along the last dimension, built from
/// differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `|x|` whose derivative is `sign(x)`, i.e. 0 at exactly 0.
pub fn abs_zero_subgradient(x: &Tensor) -> Result<Tensor> {
    let sign = x.detach().sign()?;
    Ok(x.mul(&sign)?)
}

/// Splits `(B, T, D)` into `(B, heads, T, D / heads)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    if d % heads != 0 {
        return Err(config_err(format!("dimension {d} not divisible by {heads} heads")));
    }
    Ok(x.reshape((b, t, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * dh))?)
}

/// Scaled dot-product attention over pre-projected, head-split tensors.
/// Returns the attended values and the row-stochastic attention matrix.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
    let probs = softmax_last(&scores)?;
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Broadcasts a `(1, T, D)` or `(T, D)` tensor to `batch` copies.
pub fn expand_batch(x: &Tensor, batch: usize) -> Result<Tensor> {
    match x.rank() {
        2 => {
            let (t, d) = x.dims2()?;
            Ok(x.unsqueeze(0)?.broadcast_as((batch, t, d))?.contiguous()?)
        }
        3 => {
            let (b, t, d) = x.dims3()?;
            if b == batch {
                Ok(x.clone())
            } else if b == 1 {
                Ok(x.broadcast_as((batch, t, d))?.contiguous()?)
            } else {
                Err(shape_err(format!("cannot expand batch {b} to {batch}")))
            }
        }
        r => Err(shape_err(format!("expected rank 2 or 3 token tensor, got rank {r}"))),
    }
}
