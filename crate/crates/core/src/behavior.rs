//! Action and expected-utility networks, the planning utilities, λ-returns
//! and the two policy-gradient estimators.
//!
//! Utilities follow the expected-free-energy sign convention: lower is
//! better, and the actor minimizes them.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use cai_envs::{ActionSpace, PreferencePrior};

use crate::arch::ArchConfig;
use crate::dist::{kl_gaussian, normal_noise, one_hot, Categorical, GaussianParams, SquashedGaussian};
use crate::nn::{logsumexp_rows, Activation, Mlp};
use crate::params::Builder;
use crate::world_model::{
    critic_scores, gaussian_log_density, laplace_log_density, Critic, LatentDynamics, State, WorldModel,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub entropy_scale: f64,
}

impl Default for ReturnConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lambda: 0.95, horizon: 6, entropy_scale: 3e-4 }
    }
}

impl ReturnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.entropy_scale >= 0.0) {
            return Err(Error::Config("entropy_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Policy family, fixed by the environment's action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Discrete(usize),
    Continuous(usize),
}

impl PolicyKind {
    pub fn for_space(space: &ActionSpace) -> Self {
        match space {
            ActionSpace::Discrete { n } => PolicyKind::Discrete(*n),
            ActionSpace::Continuous { dim, .. } => PolicyKind::Continuous(*dim),
        }
    }

    /// Width of the encoded action fed to the dynamics.
    pub fn action_dim(&self) -> usize {
        match *self {
            PolicyKind::Discrete(n) | PolicyKind::Continuous(n) => n,
        }
    }

    fn head_dim(&self) -> usize {
        match *self {
            PolicyKind::Discrete(n) => n,
            PolicyKind::Continuous(d) => 2 * d,
        }
    }
}

/// q_θ(a | s).
#[derive(Debug, Clone)]
pub struct ActionNet {
    mlp: Mlp,
    kind: PolicyKind,
    min_std: f64,
}

#[derive(Debug, Clone)]
pub enum Policy {
    Categorical(Categorical),
    Squashed(SquashedGaussian),
}

/// One action per row, encoded for the dynamics, with the quantities the
/// estimators need.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub action: Tensor,
    pub indices: Option<Vec<usize>>,
    pub log_prob: Option<Tensor>,
    pub entropy: Tensor,
}

impl ActionNet {
    pub fn new(b: &mut Builder, arch: &ArchConfig, kind: PolicyKind) -> Result<Self> {
        let mlp = Mlp::new(b, &arch.actor_dims(kind.head_dim()), Activation::Elu, Activation::None)?;
        Ok(Self { mlp, kind, min_std: arch.min_std })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn policy(&self, feat: &Tensor) -> Result<Policy> {
        let out = self.mlp.forward(feat)?;
        Ok(match self.kind {
            PolicyKind::Discrete(_) => Policy::Categorical(Categorical::from_logits(&out)?),
            PolicyKind::Continuous(_) => {
                Policy::Squashed(SquashedGaussian { base: GaussianParams::from_raw(&out, self.min_std)? })
            }
        })
    }
}

impl Policy {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<PolicySample> {
        match self {
            Policy::Categorical(c) => {
                let idx = c.sample(rng)?;
                let action = one_hot(&idx, c.num_classes(), c.log_probs.dtype())?;
                Ok(PolicySample {
                    log_prob: Some(c.log_prob(&idx)?),
                    entropy: c.entropy()?,
                    action,
                    indices: Some(idx),
                })
            }
            Policy::Squashed(g) => {
                let eps = normal_noise(g.base.mean.dims(), g.base.mean.dtype(), rng)?;
                let s = g.rsample_with(&eps)?;
                let entropy = g.entropy_estimate(&s)?;
                Ok(PolicySample { action: s.action, indices: None, log_prob: None, entropy })
            }
        }
    }

    /// Deterministic action: argmax class or squashed mean.
    pub fn mode(&self) -> Result<(Tensor, Option<Vec<usize>>)> {
        match self {
            Policy::Categorical(c) => {
                let idx = c.mode()?;
                Ok((one_hot(&idx, c.num_classes(), c.log_probs.dtype())?, Some(idx)))
            }
            Policy::Squashed(g) => Ok((g.mode()?, None)),
        }
    }
}

/// Exact categorical entropy; for the squashed Gaussian, the single-sample
/// estimate at the given pre-squash draw.
pub fn policy_entropy(policy: &Policy, pre_tanh: Option<&Tensor>) -> Result<Tensor> {
    match policy {
        Policy::Categorical(c) => c.entropy(),
        Policy::Squashed(g) => match pre_tanh {
            Some(u) => Ok((g.base.entropy()? + SquashedGaussian::log_det_jacobian(u)?)?),
            None => Err(Error::Contract("squashed-Gaussian entropy needs a sample".into())),
        },
    }
}

/// g_ψ(s): expected free energy to go.
#[derive(Debug, Clone)]
pub struct UtilityNet {
    mlp: Mlp,
}

impl UtilityNet {
    pub fn new(b: &mut Builder, arch: &ArchConfig) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(b, &arch.utility_dims(), Activation::Elu, Activation::None)? })
    }

    pub fn forward(&self, feat: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(feat)?.squeeze(1)?)
    }
}

/// Outcome part of a step utility, evaluated at an imagined next state.
pub trait OutcomeModel {
    fn outcome(&self, next: &State, prior: &GaussianParams) -> Result<Tensor>;
}

/// −f(goal, s) + log((1/K) Σ_j exp f(o_j, s)) per row.
pub fn gnce_outcome(state_emb: &Tensor, goal_emb: &Tensor, neg_emb: &Tensor) -> Result<Tensor> {
    let k = neg_emb.dims()[0];
    if k == 0 {
        return Err(Error::Contract("contrastive utility needs at least one negative".into()));
    }
    let goal = critic_scores(state_emb, goal_emb)?.squeeze(1)?;
    let lse = logsumexp_rows(&critic_scores(state_emb, neg_emb)?)?.squeeze(1)?;
    Ok(((lse - goal)? - (k as f64).ln())?)
}

/// Adds the action-entropy term: `outcome − η·H`.
pub fn with_entropy(outcome: &Tensor, entropy: &Tensor, entropy_scale: f64) -> Result<Tensor> {
    if entropy_scale == 0.0 {
        return Ok(outcome.clone());
    }
    Ok((outcome - (entropy * entropy_scale)?)?)
}

/// Contrastive planning utility with goal and negative embeddings from the
/// (frozen) critic.
pub struct ContrastiveOutcome<'a> {
    pub critic: &'a Critic,
    pub goal_emb: Tensor,
    pub neg_emb: Tensor,
}

impl OutcomeModel for ContrastiveOutcome<'_> {
    fn outcome(&self, next: &State, _prior: &GaussianParams) -> Result<Tensor> {
        gnce_outcome(&self.critic.embed_state(&next.z)?, &self.goal_emb, &self.neg_emb)
    }
}

/// Likelihood planning utility: the preference log-density of the decoded
/// mean, optionally with the information-gain term.
pub struct LikelihoodOutcome<'a> {
    pub model: &'a WorldModel,
    /// Normalized goal image `(64, 64, 3)`.
    pub goal: Tensor,
    pub prior: PreferencePrior,
    pub include_intrinsic: bool,
}

impl OutcomeModel for LikelihoodOutcome<'_> {
    fn outcome(&self, next: &State, prior: &GaussianParams) -> Result<Tensor> {
        let decoded = self.model.decoder()?.forward(&next.feat()?)?;
        let extrinsic = match self.prior {
            PreferencePrior::Laplace => laplace_log_density(&decoded, &self.goal)?,
            PreferencePrior::Gaussian => gaussian_log_density(&decoded, &self.goal)?,
        };
        let mut value = extrinsic.neg()?;
        if self.include_intrinsic {
            let post = self.model.posterior_infer(&next.h, &self.model.encode(&decoded)?)?;
            value = (value - kl_gaussian(&post, prior)?)?;
        }
        Ok(value)
    }
}

/// Reward planning utility: −r̂(s).
pub struct RewardOutcome<'a> {
    pub model: &'a WorldModel,
}

impl OutcomeModel for RewardOutcome<'_> {
    fn outcome(&self, next: &State, _prior: &GaussianParams) -> Result<Tensor> {
        Ok(self.model.reward(&next.feat()?)?.neg()?)
    }
}

/// Imagined trajectories from a batch of start states.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `s_0 … s_H`.
    pub states: Vec<State>,
    /// `a_t ~ q(a | s_t)` for `t < H`.
    pub actions: Vec<Tensor>,
    /// Priors that produced `s_1 … s_H`.
    pub priors: Vec<GaussianParams>,
    /// log q(a_t | s_t), discrete policies only.
    pub log_probs: Vec<Tensor>,
    /// H(q(a | s_t)).
    pub entropies: Vec<Tensor>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_discrete(&self) -> bool {
        !self.log_probs.is_empty()
    }
}

/// Rolls the prior forward `horizon` steps, sampling actions from `actor`.
/// Discrete rollouts are cut from the graph; continuous ones keep the
/// pathwise dependence of states on reparameterized actions.
pub fn imagine(
    dynamics: &dyn LatentDynamics,
    actor: &ActionNet,
    start: &State,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::Config("imagination horizon must be at least 1".into()));
    }
    let discrete = matches!(actor.kind(), PolicyKind::Discrete(_));
    let n = start.rows();
    let dtype = start.h.dtype();
    let mut states = vec![start.detach()];
    let (mut actions, mut priors, mut log_probs, mut entropies) = (vec![], vec![], vec![], vec![]);
    for _ in 0..horizon {
        let s = states.last().unwrap();
        let sample = actor.policy(&s.feat()?)?.sample(rng)?;
        let eps = normal_noise(&[n, dynamics.stoch_dim()], dtype, rng)?;
        let (mut next, prior) = dynamics.img_step(s, &sample.action, &eps)?;
        if discrete {
            next = next.detach();
            log_probs.push(sample.log_prob.clone().expect("categorical sample has log-prob"));
        }
        actions.push(sample.action);
        entropies.push(sample.entropy);
        priors.push(prior);
        states.push(next);
    }
    Ok(Rollout { states, actions, priors, log_probs, entropies })
}

/// U_t = outcome(s_{t+1}) − η·H(q(a | s_t)) for every imagined step.
pub fn step_utilities(rollout: &Rollout, outcome: &dyn OutcomeModel, entropy_scale: f64) -> Result<Vec<Tensor>> {
    (0..rollout.horizon())
        .map(|t| {
            let o = outcome.outcome(&rollout.states[t + 1], &rollout.priors[t])?;
            let h = if rollout.is_discrete() { rollout.entropies[t].detach() } else { rollout.entropies[t].clone() };
            with_entropy(&o, &h, entropy_scale)
        })
        .collect()
}

/// Scalar λ-returns. `bootstrap[t]` is v(s_{t+1}).
pub fn lambda_returns(utilities: &[f64], bootstrap: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if utilities.len() != bootstrap.len() || utilities.is_empty() {
        return Err(Error::Contract(format!(
            "λ-returns need equal non-empty lengths, got {} utilities and {} values",
            utilities.len(),
            bootstrap.len()
        )));
    }
    let h = utilities.len();
    let mut out = vec![0.0; h];
    let mut next = bootstrap[h - 1];
    for t in (0..h).rev() {
        out[t] = utilities[t] + gamma * ((1.0 - lambda) * bootstrap[t] + lambda * next);
        next = out[t];
    }
    Ok(out)
}

/// Batched λ-returns over per-step row tensors.
pub fn lambda_returns_batched(utilities: &[Tensor], bootstrap: &[Tensor], gamma: f64, lambda: f64) -> Result<Vec<Tensor>> {
    if utilities.len() != bootstrap.len() || utilities.is_empty() {
        return Err(Error::Contract(format!(
            "λ-returns need equal non-empty lengths, got {} utilities and {} values",
            utilities.len(),
            bootstrap.len()
        )));
    }
    let h = utilities.len();
    let mut out: Vec<Tensor> = Vec::with_capacity(h);
    let mut next = bootstrap[h - 1].clone();
    for t in (0..h).rev() {
        let mix = ((&bootstrap[t] * (1.0 - lambda))? + (&next * lambda)?)?;
        let g = (&utilities[t] + (mix * gamma)?)?;
        next = g.clone();
        out.push(g);
    }
    out.reverse();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Score-function gradients for discrete actions.
    Reinforce,
    /// Backpropagation through reparameterized actions and dynamics.
    Pathwise,
}

/// Actor objective to minimize. Reinforce uses
/// `Σ_t [sg(G_t − b_t)·log q(a_t|s_t) − η·H_t]`, Pathwise uses `Σ_t G_t`;
/// both averaged over start states.
pub fn actor_loss(
    rollout: &Rollout,
    returns: &[Tensor],
    baselines: Option<&[Tensor]>,
    estimator: Estimator,
    entropy_scale: f64,
) -> Result<Tensor> {
    if returns.len() != rollout.horizon() {
        return Err(Error::Contract(format!("{} returns for horizon {}", returns.len(), rollout.horizon())));
    }
    let mut terms = Vec::with_capacity(returns.len());
    match estimator {
        Estimator::Reinforce => {
            if !rollout.is_discrete() {
                return Err(Error::Config("score-function estimator needs a discrete policy".into()));
            }
            for (t, g) in returns.iter().enumerate() {
                let adv = match baselines {
                    Some(b) => (g - &b[t])?.detach(),
                    None => g.detach(),
                };
                let mut term = (adv * &rollout.log_probs[t])?;
                if entropy_scale != 0.0 {
                    term = (term - (&rollout.entropies[t] * entropy_scale)?)?;
                }
                terms.push(term.mean_all()?);
            }
        }
        Estimator::Pathwise => {
            if rollout.is_discrete() {
                return Err(Error::Config("pathwise estimator needs a continuous policy".into()));
            }
            for g in returns {
                terms.push(g.mean_all()?);
            }
        }
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

/// Mean squared error between g_ψ(sg s_t) and sg G_t over all steps.
pub fn utility_net_loss(utility: &UtilityNet, states: &[State], returns: &[Tensor]) -> Result<Tensor> {
    if states.len() < returns.len() || returns.is_empty() {
        return Err(Error::Contract("utility loss needs one state per return".into()));
    }
    let feats = states[..returns.len()].iter().map(|s| s.detach().feat()).collect::<Result<Vec<_>>>()?;
    let pred = utility.forward(&Tensor::cat(&feats, 0)?)?;
    let target = Tensor::cat(returns, 0)?.detach();
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Frozen utility values v(s_{t+1}) along a rollout.
pub fn bootstrap_values(utility: &UtilityNet, rollout: &Rollout) -> Result<Vec<Tensor>> {
    rollout.states[1..].iter().map(|s| utility.forward(&s.feat()?)).collect()
}

/// Frozen utility values g_ψ(s_t) for `t < H`, used as the score-function baseline.
pub fn baseline_values(utility: &UtilityNet, rollout: &Rollout) -> Result<Vec<Tensor>> {
    rollout.states[..rollout.horizon()].iter().map(|s| Ok(utility.forward(&s.feat()?)?.detach())).collect()
}

pub fn to_f64_rows(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
