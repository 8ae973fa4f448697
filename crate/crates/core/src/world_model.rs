//! Recurrent latent state-space model with a contrastive critic, an optional
//! pixel decoder and an optional reward head.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::arch::{ArchConfig, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::conv::{Conv2d, ConvTranspose2d};
use crate::dist::{kl_gaussian, normal_noise, GaussianParams};
use crate::nn::{Activation, GruCell, Linear, Mlp};
use crate::params::Builder;
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Which optional heads a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub critic: bool,
    pub decoder: bool,
    pub reward: bool,
}

/// Deterministic memory `h` and stochastic sample `z`, batched by rows.
#[derive(Debug, Clone)]
pub struct State {
    pub h: Tensor,
    pub z: Tensor,
}

impl State {
    pub fn feat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.h, &self.z], 1)?)
    }

    pub fn detach(&self) -> Self {
        Self { h: self.h.detach(), z: self.z.detach() }
    }

    pub fn rows(&self) -> usize {
        self.h.dims()[0]
    }
}

/// Transition model used by imagination.
pub trait LatentDynamics {
    /// One prior step with a reparameterized sample drawn from `eps`.
    fn img_step(&self, state: &State, action: &Tensor, eps: &Tensor) -> Result<(State, GaussianParams)>;
    fn stoch_dim(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct Critic {
    obs: Mlp,
    state: Mlp,
}

impl Critic {
    fn new(b: &mut Builder, arch: &ArchConfig) -> Result<Self> {
        let obs_dims = [arch.embed_len(), arch.critic_hidden, arch.embed_dim];
        let state_dims = [arch.stoch, arch.critic_hidden, arch.embed_dim];
        Ok(Self {
            obs: Mlp::new(&mut b.sub("obs"), &obs_dims, Activation::Elu, Activation::Tanh)?,
            state: Mlp::new(&mut b.sub("state"), &state_dims, Activation::Elu, Activation::Tanh)?,
        })
    }

    /// h(o) from encoder features, each coordinate in (−1, 1).
    pub fn embed_obs(&self, features: &Tensor) -> Result<Tensor> {
        self.obs.forward(features)
    }

    /// g(s) from the stochastic latent, each coordinate in (−1, 1).
    pub fn embed_state(&self, z: &Tensor) -> Result<Tensor> {
        self.state.forward(z)
    }
}

/// `scores[i][j] = state_emb[i] · obs_emb[j]`.
pub fn critic_scores(state_emb: &Tensor, obs_emb: &Tensor) -> Result<Tensor> {
    Ok(state_emb.matmul(&obs_emb.t()?)?)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    dense: Linear,
    deconvs: Vec<ConvTranspose2d>,
    seed_channels: usize,
}

impl Decoder {
    fn new(b: &mut Builder, arch: &ArchConfig) -> Result<Self> {
        let seed_channels = arch.decoder_seed_channels();
        let dense = Linear::new(&mut b.sub("dense"), arch.feat_dim(), seed_channels)?;
        let mut in_c = seed_channels;
        let mut deconvs = Vec::new();
        for (i, (&c, &k)) in arch.decoder_channels.iter().zip(&arch.decoder_kernels).enumerate() {
            deconvs.push(ConvTranspose2d::new(&mut b.sub(&format!("deconv{i}")), in_c, c, k, 2)?);
            in_c = c;
        }
        Ok(Self { dense, deconvs, seed_channels })
    }

    /// Mean image `(n, 64, 64, 3)` in normalized pixel units.
    pub fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        let n = feat.dims()[0];
        let mut x = self.dense.forward(feat)?.reshape((n, 1, 1, self.seed_channels))?;
        let last = self.deconvs.len() - 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            x = d.forward(&x)?;
            if i != last {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    arch: ArchConfig,
    action_dim: usize,
    heads: Heads,
    encoder: Vec<Conv2d>,
    img_in: Linear,
    gru: GruCell,
    prior_head: Mlp,
    post_head: Mlp,
    critic: Option<Critic>,
    decoder: Option<Decoder>,
    reward: Option<Mlp>,
    dtype: DType,
}

/// Posterior rollout over a batch of sequences, rows ordered `t·B + b`.
#[derive(Debug, Clone)]
pub struct Observed {
    pub states: State,
    pub post: GaussianParams,
    pub prior: GaussianParams,
    /// Encoder features of the observations.
    pub embed: Tensor,
}

impl WorldModel {
    pub fn new(b: &mut Builder, arch: &ArchConfig, action_dim: usize, heads: Heads) -> Result<Self> {
        arch.validate()?;
        if action_dim == 0 {
            return Err(Error::Config("action dimension must be positive".into()));
        }
        let mut encoder = Vec::new();
        let mut in_c = IMAGE_CHANNELS;
        for (i, &c) in arch.encoder_channels.iter().enumerate() {
            encoder.push(Conv2d::new(&mut b.sub(&format!("encoder.conv{i}")), in_c, c, arch.encoder_kernel, 2)?);
            in_c = c;
        }
        let img_in = Linear::new(&mut b.sub("img_in"), arch.stoch + action_dim, arch.hidden)?;
        let gru = GruCell::new(&mut b.sub("gru"), arch.hidden, arch.deter)?;
        let prior_head = Mlp::new(
            &mut b.sub("prior"),
            &[arch.deter, arch.hidden, 2 * arch.stoch],
            Activation::Elu,
            Activation::None,
        )?;
        let post_head = Mlp::new(
            &mut b.sub("posterior"),
            &[arch.deter + arch.embed_len(), arch.hidden, 2 * arch.stoch],
            Activation::Elu,
            Activation::None,
        )?;
        let critic = if heads.critic { Some(Critic::new(&mut b.sub("critic"), arch)?) } else { None };
        let decoder = if heads.decoder { Some(Decoder::new(&mut b.sub("decoder"), arch)?) } else { None };
        let reward = if heads.reward {
            Some(Mlp::new(&mut b.sub("reward"), &arch.reward_dims(), Activation::Elu, Activation::None)?)
        } else {
            None
        };
        Ok(Self {
            arch: arch.clone(),
            action_dim,
            heads,
            encoder,
            img_in,
            gru,
            prior_head,
            post_head,
            critic,
            decoder,
            reward,
            dtype: b.dtype(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn heads(&self) -> Heads {
        self.heads
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn critic(&self) -> Result<&Critic> {
        self.critic.as_ref().ok_or_else(|| Error::Config("model has no contrastive critic".into()))
    }

    pub fn decoder(&self) -> Result<&Decoder> {
        self.decoder.as_ref().ok_or_else(|| Error::Config("model has no observation decoder".into()))
    }

    pub fn reward_head(&self) -> Result<&Mlp> {
        self.reward.as_ref().ok_or_else(|| Error::Config("model has no reward head".into()))
    }

    pub fn initial_state(&self, n: usize) -> Result<State> {
        Ok(State {
            h: Tensor::zeros((n, self.arch.deter), self.dtype, &Device::Cpu)?,
            z: Tensor::zeros((n, self.arch.stoch), self.dtype, &Device::Cpu)?,
        })
    }

    /// Encoder features `(n, embed_len)` of normalized images `(n, 64, 64, 3)`.
    pub fn encode(&self, obs: &Tensor) -> Result<Tensor> {
        let dims = obs.dims();
        if dims.len() != 4 || dims[1..] != [IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS] {
            return Err(Error::Contract(format!("expected (n, 64, 64, 3) observations, got {dims:?}")));
        }
        let mut x = obs.clone();
        for conv in &self.encoder {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x.reshape((dims[0], self.arch.embed_len()))?)
    }

    fn check_action(&self, state: &State, action: &Tensor) -> Result<()> {
        let (n, a) = action.dims2()?;
        if a != self.action_dim || n != state.rows() {
            return Err(Error::Contract(format!(
                "action batch {:?} does not match {} states of action dim {}",
                action.dims(),
                state.rows(),
                self.action_dim
            )));
        }
        Ok(())
    }

    /// Advances the memory and returns it with the prior belief over the next state.
    pub fn prior_predict(&self, prev: &State, action: &Tensor) -> Result<(Tensor, GaussianParams)> {
        self.check_action(prev, action)?;
        let x = self.img_in.forward(&Tensor::cat(&[&prev.z, action], 1)?)?.elu(1.0)?;
        let h = self.gru.forward(&x, &prev.h)?;
        let prior = GaussianParams::from_raw(&self.prior_head.forward(&h)?, self.arch.min_std)?;
        Ok((h, prior))
    }

    /// Filtered belief given the advanced memory and encoder features of o_t.
    pub fn posterior_infer(&self, h: &Tensor, embed: &Tensor) -> Result<GaussianParams> {
        let x = Tensor::cat(&[h, embed], 1)?;
        GaussianParams::from_raw(&self.post_head.forward(&x)?, self.arch.min_std)
    }

    /// One filtering step on already encoded observations.
    pub fn obs_step(
        &self,
        prev: &State,
        action: &Tensor,
        embed: &Tensor,
        eps: Option<&Tensor>,
    ) -> Result<(State, GaussianParams, GaussianParams)> {
        let (h, prior) = self.prior_predict(prev, action)?;
        let post = self.posterior_infer(&h, embed)?;
        let z = match eps {
            Some(e) => post.sample_with(e)?,
            None => post.mean.clone(),
        };
        Ok((State { h, z }, post, prior))
    }

    /// Filters `l` steps of `b` sequences; `obs` rows and `prev_actions` rows
    /// are ordered `t·b + i`.
    pub fn observe(&self, obs: &Tensor, prev_actions: &Tensor, b: usize, l: usize, rng: &mut impl Rng) -> Result<Observed> {
        let n = b * l;
        if obs.dims()[0] != n || prev_actions.dims()[0] != n {
            return Err(Error::Contract(format!("expected {n} rows for B={b}, L={l}")));
        }
        let embed = self.encode(obs)?;
        let eps = normal_noise(&[n, self.arch.stoch], self.dtype, rng)?;
        let mut state = self.initial_state(b)?;
        let (mut hs, mut zs) = (Vec::with_capacity(l), Vec::with_capacity(l));
        let (mut post_m, mut post_s, mut prior_m, mut prior_s) = (vec![], vec![], vec![], vec![]);
        for t in 0..l {
            let a = prev_actions.narrow(0, t * b, b)?;
            let e = embed.narrow(0, t * b, b)?;
            let (next, post, prior) = self.obs_step(&state, &a, &e, Some(&eps.narrow(0, t * b, b)?))?;
            hs.push(next.h.clone());
            zs.push(next.z.clone());
            post_m.push(post.mean);
            post_s.push(post.std);
            prior_m.push(prior.mean);
            prior_s.push(prior.std);
            state = next;
        }
        Ok(Observed {
            states: State { h: Tensor::cat(&hs, 0)?, z: Tensor::cat(&zs, 0)? },
            post: GaussianParams { mean: Tensor::cat(&post_m, 0)?, std: Tensor::cat(&post_s, 0)? },
            prior: GaussianParams { mean: Tensor::cat(&prior_m, 0)?, std: Tensor::cat(&prior_s, 0)? },
            embed,
        })
    }

    /// Predicted reward per row.
    pub fn reward(&self, feat: &Tensor) -> Result<Tensor> {
        Ok(self.reward_head()?.forward(feat)?.squeeze(1)?)
    }

    /// Critic score matrix between states (rows) and observations (columns).
    pub fn scores(&self, z: &Tensor, embed: &Tensor) -> Result<Tensor> {
        let critic = self.critic()?;
        critic_scores(&critic.embed_state(z)?, &critic.embed_obs(embed)?)
    }
}

impl LatentDynamics for WorldModel {
    fn img_step(&self, state: &State, action: &Tensor, eps: &Tensor) -> Result<(State, GaussianParams)> {
        let (h, prior) = self.prior_predict(state, action)?;
        let z = prior.sample_with(eps)?;
        Ok((State { h, z }, prior))
    }

    fn stoch_dim(&self) -> usize {
        self.arch.stoch
    }
}

/// Per-row InfoNCE penalty `log Σ_j exp(s_ij) − s_ii ≥ 0`, computed so that
/// it is non-negative in floating point.
pub fn nce_penalties(scores: &Tensor) -> Result<Tensor> {
    let (k, k2) = scores.dims2()?;
    if k == 0 || k != k2 {
        return Err(Error::Contract(format!("score matrix must be square and non-empty, got {:?}", scores.dims())));
    }
    let eye = Tensor::eye(k, scores.dtype(), scores.device())?;
    let diag = (scores * &eye)?.sum_keepdim(1)?;
    let m = scores.max_keepdim(1)?.detach();
    let lse_shifted = scores.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()?;
    Ok(((m - diag)? + lse_shifted)?.squeeze(1)?)
}

/// InfoNCE lower bound `(1/K) Σ_i [s_ii − log((1/K) Σ_j exp s_ij)]`, ≤ ln K.
pub fn info_nce(scores: &Tensor) -> Result<Tensor> {
    let k = scores.dims()[0];
    let pen = nce_penalties(scores)?.mean_all()?;
    Ok(pen.affine(-1.0, (k as f64).ln())?)
}

/// `max(free_nats, kl)` with zero gradient wherever `kl < free_nats`.
pub fn free_nats_clip(kl: &Tensor, free_nats: f64) -> Result<Tensor> {
    let mask = kl.ge(free_nats)?.to_dtype(kl.dtype())?.detach();
    let floor = (mask.ones_like()? - &mask)?;
    Ok(((kl * &mask)? + (floor * free_nats)?)?)
}

/// Loss value with the diagnostics logged per iteration.
#[derive(Debug, Clone)]
pub struct PastLoss {
    pub loss: Tensor,
    /// Mean raw KL per step.
    pub kl: f64,
    /// InfoNCE bound estimate, when a critic is used.
    pub nce_bound: Option<f64>,
    /// Negatives each positive pair is scored against.
    pub negatives: Option<usize>,
    /// Mean reconstruction NLL per step, when a decoder is used.
    pub recon_nll: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Contrastive past free energy: per step `max(free, KL) − (ln K − penalty)`,
/// summed over steps and averaged over the `b` sequences.
pub fn contrastive_past_loss(kl: &Tensor, scores: &Tensor, b: usize, free_nats: f64) -> Result<PastLoss> {
    let n = kl.dims1()?;
    if n < 2 {
        return Err(Error::Contract("contrastive loss needs B·L ≥ 2 so that negatives exist".into()));
    }
    if scores.dims() != [n, n] {
        return Err(Error::Contract(format!("score matrix {:?} does not match {n} steps", scores.dims())));
    }
    let pen = nce_penalties(scores)?;
    let nce_term = pen.affine(-1.0, (n as f64).ln())?;
    let per_step = (free_nats_clip(kl, free_nats)? - &nce_term)?;
    Ok(PastLoss {
        loss: (per_step.sum_all()? / b as f64)?,
        kl: scalar(&kl.mean_all()?)?,
        nce_bound: Some(scalar(&nce_term.mean_all()?)?),
        negatives: Some(n - 1),
        recon_nll: None,
    })
}

/// Negative log-likelihood per row of `target` under a unit-variance
/// Gaussian centred on `mean`.
pub fn gaussian_pixel_nll(mean: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = mean.dims()[0];
    let d = mean.elem_count() / n.max(1);
    let sq = (mean - target)?.sqr()?.reshape((n, d))?.sum(1)?;
    Ok(((sq * 0.5)? + d as f64 * HALF_LN_2PI)?)
}

/// Likelihood past free energy: per step `max(free, KL) − log p(o|s)`.
pub fn likelihood_past_loss(kl: &Tensor, decoded: &Tensor, target: &Tensor, b: usize, free_nats: f64) -> Result<PastLoss> {
    let n = kl.dims1()?;
    if decoded.dims() != target.dims() || decoded.dims()[0] != n {
        return Err(Error::Contract(format!(
            "decoded {:?} and target {:?} do not match {n} steps",
            decoded.dims(),
            target.dims()
        )));
    }
    let nll = gaussian_pixel_nll(decoded, target)?;
    let per_step = (free_nats_clip(kl, free_nats)? + &nll)?;
    Ok(PastLoss {
        loss: (per_step.sum_all()? / b as f64)?,
        kl: scalar(&kl.mean_all()?)?,
        nce_bound: None,
        negatives: None,
        recon_nll: Some(scalar(&nll.mean_all()?)?),
    })
}

/// Reward NLL `½(r − r̂)² + ½ ln 2π` summed over steps, averaged over sequences.
pub fn reward_loss(pred: &Tensor, reward: &Tensor, b: usize) -> Result<Tensor> {
    if pred.dims() != reward.dims() {
        return Err(Error::Contract(format!("reward prediction {:?} vs targets {:?}", pred.dims(), reward.dims())));
    }
    let per = (((pred - reward)?.sqr()? * 0.5)? + HALF_LN_2PI)?;
    Ok((per.sum_all()? / b as f64)?)
}

/// Per-row KL between posterior and prior.
pub fn step_kl(obs: &Observed) -> Result<Tensor> {
    kl_gaussian(&obs.post, &obs.prior)
}

/// Laplace log-density per row of decoded images around a goal centre.
pub fn laplace_log_density(decoded: &Tensor, center: &Tensor) -> Result<Tensor> {
    let n = decoded.dims()[0];
    let d = decoded.elem_count() / n.max(1);
    let abs = decoded.broadcast_sub(center)?.abs()?.reshape((n, d))?.sum(1)?;
    Ok((abs.neg()? - d as f64 * std::f64::consts::LN_2)?)
}

/// Gaussian log-density per row, the alternative preference prior.
pub fn gaussian_log_density(decoded: &Tensor, center: &Tensor) -> Result<Tensor> {
    let n = decoded.dims()[0];
    let d = decoded.elem_count() / n.max(1);
    let sq = decoded.broadcast_sub(center)?.sqr()?.reshape((n, d))?.sum(1)?;
    Ok(((sq * -0.5)? - d as f64 * HALF_LN_2PI)?)
}
