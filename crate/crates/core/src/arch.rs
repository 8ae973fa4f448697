//! Architecture description shared by network construction and the static
//! MAC/parameter counter.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sizes of every network in the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Stochastic latent size.
    pub stoch: usize,
    /// Recurrent memory size.
    pub deter: usize,
    /// Hidden width of the dense layers around the recurrent cell.
    pub hidden: usize,
    /// Hidden width of the action and utility networks.
    pub behavior_hidden: usize,
    /// Critic embedding dimension.
    pub embed_dim: usize,
    /// Hidden width of the critic embedders.
    pub critic_hidden: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_kernel: usize,
    pub decoder_channels: Vec<usize>,
    pub decoder_kernels: Vec<usize>,
    /// Floor added to softplus-mapped standard deviations.
    pub min_std: f64,
    pub free_nats: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            stoch: 30,
            deter: 200,
            hidden: 200,
            behavior_hidden: 200,
            embed_dim: 32,
            critic_hidden: 200,
            encoder_channels: vec![32, 64, 128, 256],
            encoder_kernel: 4,
            decoder_channels: vec![128, 64, 32, 3],
            decoder_kernels: vec![5, 5, 6, 6],
            min_std: 1e-4,
            free_nats: 3.0,
        }
    }
}

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
const STRIDE: usize = 2;

impl ArchConfig {
    /// A reduced network for smoke runs and tests.
    pub fn small() -> Self {
        Self {
            stoch: 6,
            deter: 16,
            hidden: 16,
            behavior_hidden: 16,
            embed_dim: 8,
            critic_hidden: 16,
            encoder_channels: vec![4, 4, 4, 4],
            decoder_channels: vec![4, 4, 4, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stoch", self.stoch),
            ("deter", self.deter),
            ("hidden", self.hidden),
            ("behavior_hidden", self.behavior_hidden),
            ("embed_dim", self.embed_dim),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("arch.{name} must be positive")));
            }
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("arch.encoder_channels must be non-empty and positive".into()));
        }
        if self.encoder_out_size() == 0 {
            return Err(Error::Config("encoder reduces the image below one pixel".into()));
        }
        if self.decoder_channels.len() != self.decoder_kernels.len() || self.decoder_channels.is_empty() {
            return Err(Error::Config("arch.decoder_channels and decoder_kernels must have equal length".into()));
        }
        if self.decoder_channels.last() != Some(&IMAGE_CHANNELS) {
            return Err(Error::Config("decoder must end with 3 channels".into()));
        }
        if self.decoder_out_size() != IMAGE_SIZE {
            return Err(Error::Config(format!(
                "decoder produces {}×{} images, expected {IMAGE_SIZE}×{IMAGE_SIZE}",
                self.decoder_out_size(),
                self.decoder_out_size()
            )));
        }
        if !(self.min_std > 0.0) || !(self.free_nats >= 0.0) {
            return Err(Error::Config("arch.min_std must be positive and free_nats non-negative".into()));
        }
        Ok(())
    }

    pub fn feat_dim(&self) -> usize {
        self.stoch + self.deter
    }

    /// Spatial sizes after each encoder layer, starting with the input.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![IMAGE_SIZE];
        for _ in &self.encoder_channels {
            let s = *sizes.last().unwrap();
            sizes.push(if s < self.encoder_kernel { 0 } else { (s - self.encoder_kernel) / STRIDE + 1 });
        }
        sizes
    }

    fn encoder_out_size(&self) -> usize {
        *self.encoder_sizes().last().unwrap()
    }

    /// Flattened encoder feature length.
    pub fn embed_len(&self) -> usize {
        let s = self.encoder_out_size();
        s * s * self.encoder_channels.last().copied().unwrap_or(0)
    }

    /// Channels of the 1×1 map the decoder starts from.
    pub fn decoder_seed_channels(&self) -> usize {
        self.embed_len()
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![1];
        for &k in &self.decoder_kernels {
            let s = *sizes.last().unwrap();
            sizes.push((s - 1) * STRIDE + k);
        }
        sizes
    }

    fn decoder_out_size(&self) -> usize {
        *self.decoder_sizes().last().unwrap()
    }

    /// Layers of the pixel encoder.
    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let sizes = self.encoder_sizes();
        let mut in_c = IMAGE_CHANNELS;
        self.encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &out_c)| {
                let l = LayerSpec::Conv { in_size: sizes[i], in_c, out_c, kernel: self.encoder_kernel, stride: STRIDE };
                in_c = out_c;
                l
            })
            .collect()
    }

    /// Layers of the observation decoder.
    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let sizes = self.decoder_sizes();
        let mut layers = vec![LayerSpec::Dense { inputs: self.feat_dim(), outputs: self.decoder_seed_channels() }];
        let mut in_c = self.decoder_seed_channels();
        for (i, (&out_c, &k)) in self.decoder_channels.iter().zip(&self.decoder_kernels).enumerate() {
            layers.push(LayerSpec::Deconv { in_size: sizes[i], in_c, out_c, kernel: k, stride: STRIDE });
            in_c = out_c;
        }
        layers
    }

    /// Observation-side critic embedder over encoder features.
    pub fn critic_obs_layers(&self) -> Vec<LayerSpec> {
        dense_stack(&[self.embed_len(), self.critic_hidden, self.embed_dim])
    }

    /// State-side critic embedder over the stochastic latent.
    pub fn critic_state_layers(&self) -> Vec<LayerSpec> {
        dense_stack(&[self.stoch, self.critic_hidden, self.embed_dim])
    }

    pub fn reward_layers(&self) -> Vec<LayerSpec> {
        dense_stack(&self.reward_dims())
    }

    pub fn reward_dims(&self) -> Vec<usize> {
        vec![self.feat_dim(), self.hidden, self.hidden, 1]
    }

    pub fn actor_dims(&self, action_out: usize) -> Vec<usize> {
        vec![self.feat_dim(), self.behavior_hidden, self.behavior_hidden, action_out]
    }

    pub fn utility_dims(&self) -> Vec<usize> {
        vec![self.feat_dim(), self.behavior_hidden, self.behavior_hidden, 1]
    }

    /// Recurrent core: action/state input layer, cell, prior and posterior heads.
    pub fn dynamics_layers(&self, action_dim: usize) -> Vec<LayerSpec> {
        let mut v = vec![LayerSpec::Dense { inputs: self.stoch + action_dim, outputs: self.hidden }];
        v.push(LayerSpec::Gru { inputs: self.hidden, hidden: self.deter });
        v.extend(dense_stack(&[self.deter, self.hidden, 2 * self.stoch]));
        v.extend(dense_stack(&[self.deter + self.embed_len(), self.hidden, 2 * self.stoch]));
        v
    }
}

fn dense_stack(dims: &[usize]) -> Vec<LayerSpec> {
    dims.windows(2).map(|w| LayerSpec::Dense { inputs: w[0], outputs: w[1] }).collect()
}

/// One layer in the static cost model. Square inputs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv { in_size: usize, in_c: usize, out_c: usize, kernel: usize, stride: usize },
    Deconv { in_size: usize, in_c: usize, out_c: usize, kernel: usize, stride: usize },
    /// One step of a gated recurrent cell.
    Gru { inputs: usize, hidden: usize },
    /// Dot product of two vectors.
    Dot { dim: usize },
}

impl LayerSpec {
    /// Multiply-accumulates per example.
    pub fn macs(&self) -> u64 {
        let v = match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv { in_size, in_c, out_c, kernel, stride } => {
                let o = (in_size - kernel) / stride + 1;
                o * o * kernel * kernel * in_c * out_c
            }
            LayerSpec::Deconv { in_size, in_c, out_c, kernel, .. } => in_size * in_size * in_c * kernel * kernel * out_c,
            LayerSpec::Gru { inputs, hidden } => 3 * hidden * (inputs + hidden),
            LayerSpec::Dot { dim } => dim,
        };
        v as u64
    }

    pub fn params(&self) -> u64 {
        let v = match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv { in_c, out_c, kernel, .. } | LayerSpec::Deconv { in_c, out_c, kernel, .. } => {
                kernel * kernel * in_c * out_c + out_c
            }
            LayerSpec::Gru { inputs, hidden } => 3 * hidden * (inputs + hidden) + 6 * hidden,
            LayerSpec::Dot { .. } => 0,
        };
        v as u64
    }
}

/// Summed cost of a sequence of layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCost {
    pub macs: u64,
    pub params: u64,
}

impl PathCost {
    pub fn of(layers: &[LayerSpec]) -> Self {
        Self { macs: layers.iter().map(LayerSpec::macs).sum(), params: layers.iter().map(LayerSpec::params).sum() }
    }

    pub fn plus(self, other: PathCost) -> Self {
        Self { macs: self.macs + other.macs, params: self.params + other.params }
    }
}

/// Cost of the likelihood representation path: the decoder.
pub fn likelihood_path(arch: &ArchConfig) -> PathCost {
    PathCost::of(&arch.decoder_layers())
}

/// Cost of the contrastive representation path: both embedders and the dot product.
pub fn contrastive_path(arch: &ArchConfig) -> PathCost {
    let mut layers = arch.critic_obs_layers();
    layers.extend(arch.critic_state_layers());
    layers.push(LayerSpec::Dot { dim: arch.embed_dim });
    PathCost::of(&layers)
}

pub fn encoder_path(arch: &ArchConfig) -> PathCost {
    PathCost::of(&arch.encoder_layers())
}

/// Stable 64-bit FNV-1a hash of a serializable value's JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let a = ArchConfig::default();
        a.validate().unwrap();
        assert_eq!(a.encoder_sizes(), vec![64, 31, 14, 6, 2]);
        assert_eq!(a.embed_len(), 1024);
        assert_eq!(a.decoder_sizes(), vec![1, 5, 13, 30, 64]);
    }

    #[test]
    fn dense_and_conv_costs() {
        assert_eq!(LayerSpec::Dense { inputs: 3, outputs: 4 }.macs(), 12);
        assert_eq!(LayerSpec::Dense { inputs: 3, outputs: 4 }.params(), 16);
        let c = LayerSpec::Conv { in_size: 64, in_c: 3, out_c: 32, kernel: 4, stride: 2 };
        assert_eq!(c.macs(), 31 * 31 * 16 * 3 * 32);
        assert_eq!(c.params(), 16 * 3 * 32 + 32);
    }

    #[test]
    fn doubling_channels_quadruples_inner_conv_macs() {
        let a = ArchConfig::default();
        let b = ArchConfig { encoder_channels: a.encoder_channels.iter().map(|c| 2 * c).collect(), ..a.clone() };
        let inner = |x: &ArchConfig| x.encoder_layers()[1..].iter().map(LayerSpec::macs).sum::<u64>();
        assert_eq!(inner(&b), 4 * inner(&a));
        let total_ratio = encoder_path(&b).macs as f64 / encoder_path(&a).macs as f64;
        assert!(total_ratio > 3.5 && total_ratio <= 4.0);
    }

    #[test]
    fn invalid_decoder_rejected() {
        let a = ArchConfig { decoder_kernels: vec![4, 4, 4, 4], ..Default::default() };
        assert!(matches!(a.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = ArchConfig::default();
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&a.clone()).unwrap());
        let b = ArchConfig { embed_dim: 16, ..Default::default() };
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }
}
