//! Adam with global-norm gradient clipping and checkpointable moments.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 100.0 }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every variable in `params` that has a gradient.
    /// A non-finite gradient norm aborts without touching any parameter.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<StepInfo> {
        let mut sq = 0.0f64;
        let mut present = Vec::new();
        for (name, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                // Variable gradients still reference the forward graph; the
                // moments must not keep it alive.
                let g = g.detach();
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                present.push((name.clone(), var, g));
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm {grad_norm}")));
        }
        let clipped = grad_norm > self.config.clip_norm;
        let scale = if clipped { self.config.clip_norm / grad_norm } else { 1.0 };

        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m = match self.m.get(&name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let delta = (((&m / bc1)? / denom)? * c.lr)?;
            var.set(&(var.as_tensor() - delta)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(StepInfo { grad_norm, clipped })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, t) in &self.m {
            map.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            map.insert(format!("v.{k}"), t.clone());
        }
        map.insert("step".into(), Tensor::new(&[self.step as f64], &Device::Cpu)?);
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let step = map
            .get("step")
            .ok_or_else(|| Error::Checkpoint("optimizer state without step count".into()))?
            .to_vec1::<f64>()?[0];
        self.step = step as u64;
        self.m.clear();
        self.v.clear();
        for (k, t) in map {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), t);
            }
        }
        Ok(())
    }
}
