//! Named parameter storage with seeded initialization.
//!
//! Networks are assembled through a [`Builder`], which pulls each weight
//! from a [`ParamSource`]. The live source creates trainable variables,
//! initialized from a caller-provided generator so runs are reproducible;
//! the frozen source hands out detached copies, used for the
//! previous-epoch snapshots and for loading checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Glorot/Xavier uniform with the given fans.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Const(f64),
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
        }
    }
}

pub trait ParamSource {
    fn fetch(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
    fn dtype(&self) -> DType;
}

/// Trainable parameters, kept in name order.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, vars: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
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

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect()
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every variable from `values`; names and shapes must match.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: expected {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Order-independent checksum of all values, used to verify read-only
    /// evaluation.
    pub fn checksum(&self) -> Result<f64> {
        let mut acc = 0.0;
        for (i, v) in self.vars.values().enumerate() {
            let s = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            acc += s * (1.0 + i as f64 * 1e-3);
        }
        Ok(acc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> =
            self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.assign(&map)
    }
}

/// Creates variables in a store, initialized from `rng`.
pub struct InitSource<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamSource for InitSource<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.vars.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} defined twice")));
        }
        let n = shape.iter().product();
        let values = init.sample(n, self.rng);
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Hands out constant tensors from a snapshot.
pub struct FrozenSource<'a> {
    pub values: &'a HashMap<String, Tensor>,
    pub dtype: DType,
}

impl ParamSource for FrozenSource<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .values
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if t.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: expected {shape:?}, found {:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(self.dtype)?.detach())
    }

    fn dtype(&self) -> DType {
        self.dtype
    }
}

/// Prefix-scoped view over a parameter source.
pub struct Builder<'a> {
    src: &'a mut dyn ParamSource,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(src: &'a mut dyn ParamSource) -> Self {
        Self { src, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder { src: &mut *self.src, prefix }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.src.fetch(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.src.dtype()
    }
}
