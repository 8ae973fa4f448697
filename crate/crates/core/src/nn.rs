//! Dense layers, perceptrons and the gated recurrent cell.

use candle_core::Tensor;

use crate::params::{Builder, Init};
use crate::Result;

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// log(1 + eˣ), stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Row-wise log Σ exp over the last dimension, keeping that dimension.
pub fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let m = x.max_keepdim(last)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(last)?.log()?;
    Ok((s + m)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Elu => x.elu(1.0)?,
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::None => x.clone(),
        })
    }
}

/// `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = b.get("weight", &[in_dim, out_dim], Init::Glorot { fan_in: in_dim, fan_out: out_dim })?;
        let bias = b.get("bias", &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Stack of dense layers; the activation is applied between layers and,
/// optionally, after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden_act: Activation,
    out_act: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(b: &mut Builder, dims: &[usize], hidden_act: Activation, out_act: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut b.sub(&format!("l{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, hidden_act, out_act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            h = if i == last { self.out_act.apply(&h)? } else { self.hidden_act.apply(&h)? };
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }
}

/// Gated recurrent unit:
/// r = σ(x·Wr + h·Ur), u = σ(x·Wu + h·Uu), n = tanh(x·Wn + r ⊙ (h·Un)),
/// h' = (1 − u) ⊙ n + u ⊙ h.
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(b: &mut Builder, in_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(&mut b.sub("input"), in_dim, 3 * hidden)?,
            recurrent: Linear::new(&mut b.sub("recurrent"), hidden, 3 * hidden)?,
            hidden,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.hidden;
        let gx = self.input.forward(x)?;
        let gh = self.recurrent.forward(h)?;
        let reset = sigmoid(&(gx.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
        let update = sigmoid(&(gx.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
        let cand = (gx.narrow(1, 2 * n, n)? + (reset * gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
        let keep = (update.ones_like()? - &update)?;
        Ok(((keep * cand)? + (update * h)?)?)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}
