use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment estimates are keyed by parameter name
/// so they can be checkpointed alongside the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(config_err("invalid optimizer settings"));
        }
        Ok(Self {
            config,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::new();
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        store.insert("x", x.clone()).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1, AdamConfig::default()).unwrap();
        adam.step(&store, &grads).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        // The bias-corrected first step is lr · sign(g) up to eps.
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = Var::from_tensor(&Tensor::new(&[3.0f32, -4.0], &Device::Cpu).unwrap()).unwrap();
        store.insert("x", x.clone()).unwrap();
        let mut adam = Adam::new(0.05, AdamConfig::default()).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            adam.step(&store, &loss.backward().unwrap()).unwrap();
        }
        let n = x.as_tensor().to_dtype(DType::F64).unwrap().sqr().unwrap().sum_all().unwrap();
        assert!(n.to_scalar::<f64>().unwrap() < 1e-2);
    }
}
