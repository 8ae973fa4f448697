//! The four agent kinds, their update step and acting by posterior filtering.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cai_envs::{Action, ActionSpace, GoalSpec, Observation, PreferencePrior, OBS_CHANNELS, OBS_HEIGHT, OBS_WIDTH};

use crate::arch::ArchConfig;
use crate::behavior::{
    actor_loss, baseline_values, bootstrap_values, imagine, lambda_returns_batched, step_utilities, utility_net_loss,
    with_entropy, ActionNet, ContrastiveOutcome, Estimator, LikelihoodOutcome, OutcomeModel, Policy, PolicyKind,
    ReturnConfig, RewardOutcome, UtilityNet,
};
use crate::dist::{normal_noise, GaussianParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Builder, FrozenSource, InitSource, ParamStore};
use crate::replay::Batch;
use crate::world_model::{
    contrastive_past_loss, likelihood_past_loss, reward_loss, step_kl, Heads, State, WorldModel,
};
use crate::{Error, Result};

/// Agent variants, differing only in their loss triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Reconstruction + reward model, reward-seeking behavior.
    Dreamer,
    /// Contrastive + reward model, reward-seeking behavior.
    ContrastiveDreamer,
    /// Reconstruction model, goal-image likelihood behavior.
    LikelihoodAif,
    /// Contrastive model, contrastive goal behavior.
    ContrastiveAif,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planning {
    Reward,
    Likelihood,
    Contrastive,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] =
        [AgentKind::Dreamer, AgentKind::ContrastiveDreamer, AgentKind::LikelihoodAif, AgentKind::ContrastiveAif];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Dreamer => "dreamer",
            AgentKind::ContrastiveDreamer => "contrastive-dreamer",
            AgentKind::LikelihoodAif => "likelihood-aif",
            AgentKind::ContrastiveAif => "contrastive-aif",
        }
    }

    pub fn heads(self) -> Heads {
        match self {
            AgentKind::Dreamer => Heads { critic: false, decoder: true, reward: true },
            AgentKind::ContrastiveDreamer => Heads { critic: true, decoder: false, reward: true },
            AgentKind::LikelihoodAif => Heads { critic: false, decoder: true, reward: false },
            AgentKind::ContrastiveAif => Heads { critic: true, decoder: false, reward: false },
        }
    }

    pub fn planning(self) -> Planning {
        match self {
            AgentKind::Dreamer | AgentKind::ContrastiveDreamer => Planning::Reward,
            AgentKind::LikelihoodAif => Planning::Likelihood,
            AgentKind::ContrastiveAif => Planning::Contrastive,
        }
    }

    pub fn is_contrastive(self) -> bool {
        self.heads().critic
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub model_lr: f64,
    pub actor_lr: f64,
    pub utility_lr: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { model_lr: 6e-4, actor_lr: 8e-5, utility_lr: 8e-5, clip_norm: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub arch: ArchConfig,
    pub returns: ReturnConfig,
    pub optim: OptimConfig,
    pub preference: PreferencePrior,
    /// Adds the information-gain term to the likelihood planning utility.
    pub include_intrinsic: bool,
}

impl AgentConfig {
    pub fn new(kind: AgentKind) -> Self {
        Self {
            kind,
            arch: ArchConfig::default(),
            returns: ReturnConfig::default(),
            optim: OptimConfig::default(),
            preference: PreferencePrior::Laplace,
            include_intrinsic: false,
        }
    }
}

/// Scalars from one update step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub model_loss: f64,
    pub kl: f64,
    pub nce_bound: Option<f64>,
    pub negatives: Option<usize>,
    pub recon_nll: Option<f64>,
    pub reward_loss: Option<f64>,
    pub actor_loss: f64,
    pub utility_loss: f64,
    pub mean_return: f64,
    pub model_grad_norm: f64,
}

/// Running posterior belief used while acting.
#[derive(Debug, Clone)]
pub struct Filter {
    pub state: State,
    pub prev_action: Tensor,
    pub prior: Option<GaussianParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Sample actions and latent states.
    Sample,
    /// Argmax / mean action and mean latent state.
    Mode,
}

pub struct Agent {
    pub config: AgentConfig,
    policy_kind: PolicyKind,
    action_space: ActionSpace,
    goal: GoalSpec,
    goal_center: Tensor,
    dtype: DType,
    model_params: ParamStore,
    actor_params: ParamStore,
    utility_params: ParamStore,
    model: WorldModel,
    actor: ActionNet,
    utility: UtilityNet,
    frozen_model: WorldModel,
    frozen_utility: UtilityNet,
    frozen_goal_emb: Option<Tensor>,
    model_opt: Adam,
    actor_opt: Adam,
    utility_opt: Adam,
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{name} became {v}")))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Normalized observations as an `(n, 64, 64, 3)` tensor.
pub fn observations_tensor(obs: &[&Observation], dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(obs.len() * cai_envs::OBS_LEN);
    for o in obs {
        v.extend(o.normalized());
    }
    Ok(Tensor::from_vec(v, (obs.len(), OBS_HEIGHT, OBS_WIDTH, OBS_CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        action_space: ActionSpace,
        goal: GoalSpec,
        dtype: DType,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.arch.validate()?;
        config.returns.validate()?;
        let policy_kind = PolicyKind::for_space(&action_space);
        let heads = config.kind.heads();
        let mut model_params = ParamStore::new(dtype);
        let model = {
            let mut src = InitSource { store: &mut model_params, rng };
            WorldModel::new(&mut Builder::new(&mut src), &config.arch, policy_kind.action_dim(), heads)?
        };
        let mut actor_params = ParamStore::new(dtype);
        let actor = {
            let mut src = InitSource { store: &mut actor_params, rng };
            ActionNet::new(&mut Builder::new(&mut src).sub("actor"), &config.arch, policy_kind)?
        };
        let mut utility_params = ParamStore::new(dtype);
        let utility = {
            let mut src = InitSource { store: &mut utility_params, rng };
            UtilityNet::new(&mut Builder::new(&mut src).sub("utility"), &config.arch)?
        };
        let goal = goal.with_prior(config.preference);
        let goal_center = observations_tensor(&[&goal.observation], dtype)?.squeeze(0)?;
        let o = &config.optim;
        let adam = |lr: f64| Adam::new(AdamConfig { clip_norm: o.clip_norm, ..AdamConfig::with_lr(lr) });
        let (model_opt, actor_opt, utility_opt) = (adam(o.model_lr), adam(o.actor_lr), adam(o.utility_lr));
        let frozen_model = model.clone();
        let frozen_utility = utility.clone();
        let mut agent = Self {
            config,
            policy_kind,
            action_space,
            goal,
            goal_center,
            dtype,
            model_params,
            actor_params,
            utility_params,
            model,
            actor,
            utility,
            frozen_model,
            frozen_utility,
            frozen_goal_emb: None,
            model_opt,
            actor_opt,
            utility_opt,
        };
        agent.refresh_frozen()?;
        Ok(agent)
    }

    pub fn kind(&self) -> AgentKind {
        self.config.kind
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn actor(&self) -> &ActionNet {
        &self.actor
    }

    pub fn utility(&self) -> &UtilityNet {
        &self.utility
    }

    pub fn frozen_model(&self) -> &WorldModel {
        &self.frozen_model
    }

    pub fn frozen_utility(&self) -> &UtilityNet {
        &self.frozen_utility
    }

    pub fn model_params(&self) -> &ParamStore {
        &self.model_params
    }

    pub fn actor_params(&self) -> &ParamStore {
        &self.actor_params
    }

    pub fn utility_params(&self) -> &ParamStore {
        &self.utility_params
    }

    /// Checksum over every live parameter.
    pub fn checksum(&self) -> Result<f64> {
        Ok(self.model_params.checksum()? + self.actor_params.checksum()? + self.utility_params.checksum()?)
    }

    /// Copies the live world model and utility network into the frozen
    /// copies used for imagination and targets.
    pub fn refresh_frozen(&mut self) -> Result<()> {
        let snap = self.model_params.snapshot()?;
        self.frozen_model = self.rebuild_model(&snap)?;
        let snap = self.utility_params.snapshot()?;
        let mut src = FrozenSource { values: &snap, dtype: self.dtype };
        self.frozen_utility = UtilityNet::new(&mut Builder::new(&mut src).sub("utility"), &self.config.arch)?;
        self.frozen_goal_emb = if self.kind().is_contrastive() {
            let embed = self.frozen_model.encode(&self.goal_center.unsqueeze(0)?)?;
            Some(self.frozen_model.critic()?.embed_obs(&embed)?.detach())
        } else {
            None
        };
        Ok(())
    }

    fn rebuild_model(&self, values: &HashMap<String, Tensor>) -> Result<WorldModel> {
        let mut src = FrozenSource { values, dtype: self.dtype };
        WorldModel::new(&mut Builder::new(&mut src), &self.config.arch, self.policy_kind.action_dim(), self.kind().heads())
    }

    /// World-model loss for a batch; returns the loss tensor, stats and the
    /// posterior rollout.
    pub fn model_loss(&self, batch: &Batch, rng: &mut impl Rng) -> Result<(Tensor, UpdateStats, crate::world_model::Observed)> {
        let b = batch.b;
        let free = self.config.arch.free_nats;
        let observed = self.model.observe(&batch.obs, &batch.prev_actions, b, batch.l, rng)?;
        let kl = step_kl(&observed)?;
        let heads = self.kind().heads();
        let mut stats = UpdateStats::default();
        let past = if heads.critic {
            let scores = self.model.scores(&observed.states.z, &observed.embed)?;
            contrastive_past_loss(&kl, &scores, b, free)?
        } else {
            let decoded = self.model.decoder()?.forward(&observed.states.feat()?)?;
            likelihood_past_loss(&kl, &decoded, &batch.obs, b, free)?
        };
        stats.kl = past.kl;
        stats.nce_bound = past.nce_bound;
        stats.negatives = past.negatives;
        stats.recon_nll = past.recon_nll;
        let mut loss = past.loss;
        if heads.reward {
            let r = reward_loss(&self.model.reward(&observed.states.feat()?)?, &batch.rewards, b)?;
            stats.reward_loss = Some(scalar(&r)?);
            loss = (loss + r)?;
        }
        stats.model_loss = scalar(&loss)?;
        Ok((loss, stats, observed))
    }

    /// Planning outcome model built on the frozen networks. `negatives`
    /// are normalized observations, used by the contrastive utility.
    pub fn outcome_model<'a>(&'a self, negatives: Option<&Tensor>) -> Result<Box<dyn OutcomeModel + 'a>> {
        self.outcome_with(&self.frozen_model, self.frozen_goal_emb.clone(), negatives)
    }

    fn outcome_with<'a>(
        &'a self,
        model: &'a WorldModel,
        goal_emb: Option<Tensor>,
        negatives: Option<&Tensor>,
    ) -> Result<Box<dyn OutcomeModel + 'a>> {
        Ok(match self.kind().planning() {
            Planning::Reward => Box::new(RewardOutcome { model }),
            Planning::Likelihood => Box::new(LikelihoodOutcome {
                model,
                goal: self.goal_center.clone(),
                prior: self.config.preference,
                include_intrinsic: self.config.include_intrinsic,
            }),
            Planning::Contrastive => {
                let negatives =
                    negatives.ok_or_else(|| Error::Contract("contrastive utility needs negative observations".into()))?;
                let critic = model.critic()?;
                let neg_emb = critic.embed_obs(&model.encode(negatives)?)?.detach();
                let goal_emb = match goal_emb {
                    Some(g) => g,
                    None => critic.embed_obs(&model.encode(&self.goal_center.unsqueeze(0)?)?)?.detach(),
                };
                Box::new(ContrastiveOutcome { critic, goal_emb, neg_emb })
            }
        })
    }

    /// One model, actor and utility update on a batch.
    pub fn update(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<UpdateStats> {
        let (loss, mut stats, observed) = self.model_loss(batch, rng)?;
        check_finite("model loss", stats.model_loss)?;
        let grads = loss.backward()?;
        stats.model_grad_norm = self.model_opt.step(&self.model_params, &grads)?.grad_norm;
        drop(grads);

        let h = self.config.returns.horizon;
        let eta = self.config.returns.entropy_scale;
        let start = observed.states.detach();
        let rollout = imagine(&self.frozen_model, &self.actor, &start, h, rng)?;
        let utilities = {
            let outcome = self.outcome_model(Some(&batch.obs))?;
            step_utilities(&rollout, outcome.as_ref(), eta)?
        };
        let bootstrap = bootstrap_values(&self.frozen_utility, &rollout)?;
        let (gamma, lambda) = (self.config.returns.gamma, self.config.returns.lambda);
        let returns = lambda_returns_batched(&utilities, &bootstrap, gamma, lambda)?;
        let a_loss = match self.policy_kind {
            PolicyKind::Discrete(_) => {
                let baselines = baseline_values(&self.frozen_utility, &rollout)?;
                actor_loss(&rollout, &returns, Some(&baselines), Estimator::Reinforce, eta)?
            }
            PolicyKind::Continuous(_) => actor_loss(&rollout, &returns, None, Estimator::Pathwise, eta)?,
        };
        stats.actor_loss = check_finite("actor loss", scalar(&a_loss)?)?;
        let grads = a_loss.backward()?;
        self.actor_opt.step(&self.actor_params, &grads)?;
        drop(grads);

        let detached: Vec<Tensor> = returns.iter().map(Tensor::detach).collect();
        stats.mean_return = scalar(&Tensor::cat(&detached, 0)?.mean_all()?)?;
        let u_loss = utility_net_loss(&self.utility, &rollout.states, &detached)?;
        stats.utility_loss = check_finite("utility loss", scalar(&u_loss)?)?;
        let grads = u_loss.backward()?;
        self.utility_opt.step(&self.utility_params, &grads)?;
        Ok(stats)
    }

    pub fn new_filter(&self) -> Result<Filter> {
        Ok(Filter {
            state: self.model.initial_state(1)?,
            prev_action: Tensor::zeros((1, self.policy_kind.action_dim()), self.dtype, &Device::Cpu)?,
            prior: None,
        })
    }

    /// Incorporates a new observation into the belief.
    pub fn filter_step(&self, filter: &mut Filter, obs: &Observation, mode: ActMode, rng: &mut impl Rng) -> Result<()> {
        let o = observations_tensor(&[obs], self.dtype)?;
        let embed = self.model.encode(&o)?;
        let eps = match mode {
            ActMode::Sample => Some(normal_noise(&[1, self.config.arch.stoch], self.dtype, rng)?),
            ActMode::Mode => None,
        };
        let (state, _post, prior) = self.model.obs_step(&filter.state, &filter.prev_action, &embed, eps.as_ref())?;
        filter.state = state.detach();
        filter.prior = Some(prior.detach());
        Ok(())
    }

    /// Filters `obs` and picks the next action from the posterior state.
    pub fn act(&self, filter: &mut Filter, obs: &Observation, mode: ActMode, rng: &mut impl Rng) -> Result<Action> {
        self.filter_step(filter, obs, mode, rng)?;
        let policy = self.actor.policy(&filter.state.feat()?)?;
        let (encoded, idx) = match mode {
            ActMode::Sample => {
                let s = policy.sample(rng)?;
                (s.action, s.indices)
            }
            ActMode::Mode => policy.mode()?,
        };
        filter.prev_action = encoded.detach();
        Ok(match idx {
            Some(i) => Action::Discrete(i[0]),
            None => {
                let v = encoded.to_dtype(DType::F32)?.squeeze(0)?.to_vec1::<f32>()?;
                Action::Continuous(v)
            }
        })
    }

    /// Sets the action fed to the next filter step (e.g. after a random action).
    pub fn set_prev_action(&self, filter: &mut Filter, action: &Action) -> Result<()> {
        let v = self.action_space.encode(action);
        filter.prev_action = Tensor::from_vec(v, (1, self.policy_kind.action_dim()), &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(())
    }

    /// Step utility `outcome(s) − η·H(q(a|s))` of given states under the live
    /// networks; lower is better.
    pub fn step_utility(&self, states: &State, prior: &GaussianParams, negatives: Option<&Tensor>) -> Result<Tensor> {
        let outcome = self.outcome_with(&self.model, None, negatives)?;
        let o = outcome.outcome(states, prior)?;
        let entropy = match self.actor.policy(&states.feat()?)? {
            Policy::Categorical(c) => c.entropy()?,
            Policy::Squashed(g) => g.base.entropy()?,
        };
        with_entropy(&o, &entropy, self.config.returns.entropy_scale)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.model_params.save(dir.join("model.safetensors"))?;
        self.actor_params.save(dir.join("actor.safetensors"))?;
        self.utility_params.save(dir.join("utility.safetensors"))?;
        self.model_opt.save(dir.join("model_opt.safetensors"))?;
        self.actor_opt.save(dir.join("actor_opt.safetensors"))?;
        self.utility_opt.save(dir.join("utility_opt.safetensors"))?;
        Ok(())
    }

    /// Restores parameters (and optimizer state when present) and refreshes
    /// the frozen copies.
    pub fn load(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.model_params.load(dir.join("model.safetensors"))?;
        self.actor_params.load(dir.join("actor.safetensors"))?;
        self.utility_params.load(dir.join("utility.safetensors"))?;
        for (opt, name) in [
            (&mut self.model_opt, "model_opt.safetensors"),
            (&mut self.actor_opt, "actor_opt.safetensors"),
            (&mut self.utility_opt, "utility_opt.safetensors"),
        ] {
            let p = dir.join(name);
            if p.exists() {
                opt.load(p)?;
            }
        }
        self.refresh_frozen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kind_names_round_trip() {
        for k in AgentKind::ALL {
            assert_eq!(k.name().parse::<AgentKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("dreamer-v2".parse::<AgentKind>().is_err());
    }

    #[test]
    fn contrastive_aif_builds_no_decoder_or_reward() {
        let goal = cai_envs::grid::goal_spec(6, PreferencePrior::Laplace).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::new(
            AgentConfig::new(AgentKind::ContrastiveAif),
            ActionSpace::Discrete { n: 3 },
            goal,
            DType::F32,
            &mut rng,
        )
        .unwrap();
        let names: Vec<_> = agent.model_params().vars().map(|(k, _)| k.clone()).collect();
        assert!(names.iter().all(|n| !n.starts_with("decoder") && !n.starts_with("reward")));
        assert!(names.iter().any(|n| n.starts_with("critic")));
    }
}
