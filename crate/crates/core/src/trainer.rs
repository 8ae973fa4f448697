//! Outer training loop: seeding, interleaved updates and data collection,
//! metrics and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cai_envs::{Action, Environment, TaskSpec};

use crate::agent::{ActMode, Agent, AgentConfig, UpdateStats};
use crate::arch::fingerprint;
use crate::replay::{EpisodeRecord, ReplayBuffer};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Random-action episodes collected before training (R).
    pub seed_episodes: usize,
    /// Gradient updates per iteration (U).
    pub updates_per_iteration: usize,
    /// Sequences per batch (B).
    pub batch_size: usize,
    /// Sequence length (L).
    pub seq_len: usize,
    /// Outer iterations, each collecting one policy episode.
    pub iterations: usize,
    /// Checkpoint cadence in iterations; the last iteration is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed_episodes: 50,
            updates_per_iteration: 100,
            batch_size: 50,
            seq_len: 7,
            iterations: 150,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("training.batch_size and training.seq_len must be positive".into()));
        }
        if self.batch_size * self.seq_len < 2 {
            return Err(Error::Config("training.batch_size × training.seq_len must be at least 2".into()));
        }
        if self.seed_episodes == 0 {
            return Err(Error::Config("training.seed_episodes must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("training.checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One record per outer iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub iteration: usize,
    /// Episodes in the buffer after collection, seed episodes included.
    pub episodes: usize,
    pub updates: usize,
    pub model_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub utility_loss: Option<f64>,
    pub kl: Option<f64>,
    pub nce_bound: Option<f64>,
    pub recon_nll: Option<f64>,
    pub reward_loss: Option<f64>,
    pub episode_return: f64,
    pub episode_steps: usize,
    pub seconds_per_update: Option<f64>,
}

impl EpochStats {
    /// Same record with the timing field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { seconds_per_update: None, ..self.clone() }
    }
}

/// Independent random streams, serialized in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub sample: ChaCha8Rng,
    pub model: ChaCha8Rng,
    pub act: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { sample: stream(1), model: stream(2), act: stream(3) }
    }
}

/// Seed for the environment instance of the `index`-th collected episode.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub fingerprint: String,
    pub task: TaskSpec,
    pub agent: AgentConfig,
    pub training: TrainConfig,
    pub seed: u64,
    /// Completed iterations.
    pub iteration: usize,
    /// Episodes on disk that belong to this checkpoint.
    pub episodes: usize,
    pub rngs: RngStreams,
}

/// Hash identifying the model-relevant configuration.
pub fn config_fingerprint(task: &TaskSpec, agent: &AgentConfig) -> Result<String> {
    fingerprint(&(task, agent))
}

pub struct Trainer {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub seed: u64,
    pub iteration: usize,
    rngs: RngStreams,
    run_dir: Option<PathBuf>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl Trainer {
    pub fn new(task: TaskSpec, agent: AgentConfig, train: TrainConfig, seed: u64, run_dir: Option<PathBuf>) -> Result<Self> {
        train.validate()?;
        let probe = task.build(seed)?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(agent, probe.action_space(), probe.goal(), DType::F32, &mut init)?;
        let buffer = ReplayBuffer::new(probe.action_space().encoded_dim());
        Ok(Self { task, train, agent, buffer, seed, iteration: 0, rngs: RngStreams::new(seed), run_dir })
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    fn env_for_episode(&self, index: usize) -> Result<Box<dyn Environment>> {
        Ok(self.task.build(episode_seed(self.seed, index as u64))?)
    }

    /// Fills the buffer with `R` uniformly random episodes.
    pub fn seed_buffer(&mut self) -> Result<()> {
        while self.buffer.len() < self.train.seed_episodes {
            let mut env = self.env_for_episode(self.buffer.len())?;
            let mut ep = EpisodeRecord::new(env.reset(), env.episode_meta());
            loop {
                let action = env.random_action(&mut self.rngs.act);
                let r = env.step(&action)?;
                ep.push(env.action_space().encode(&action), r.reward, r.observation);
                if r.done {
                    break;
                }
            }
            self.buffer.push(ep)?;
        }
        Ok(())
    }

    /// Runs one episode with the current policy.
    pub fn collect_episode(&mut self, mode: ActMode) -> Result<EpisodeRecord> {
        let mut env = self.env_for_episode(self.buffer.len())?;
        let first = env.reset();
        let mut ep = EpisodeRecord::new(first.clone(), env.episode_meta());
        let mut filter = self.agent.new_filter()?;
        let mut obs = first;
        loop {
            let action: Action = self.agent.act(&mut filter, &obs, mode, &mut self.rngs.act)?;
            let r = env.step(&action)?;
            ep.push(env.action_space().encode(&action), r.reward, r.observation.clone());
            obs = r.observation;
            if r.done {
                break;
            }
        }
        Ok(ep)
    }

    /// U updates followed by one collected episode.
    pub fn train_iteration(&mut self) -> Result<EpochStats> {
        if self.buffer.is_empty() {
            return Err(Error::Contract("train_iteration needs a seeded buffer".into()));
        }
        self.agent.refresh_frozen()?;
        let mut all: Vec<UpdateStats> = Vec::with_capacity(self.train.updates_per_iteration);
        let start = Instant::now();
        for u in 0..self.train.updates_per_iteration {
            let batch = self.buffer.sample_batch(
                self.train.batch_size,
                self.train.seq_len,
                self.agent.dtype(),
                &mut self.rngs.sample,
            )?;
            match self.agent.update(&batch, &mut self.rngs.model) {
                Ok(s) => all.push(s),
                Err(e @ Error::Divergence(_)) => {
                    self.dump_divergence(u, &e, all.last())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        let ep = self.collect_episode(ActMode::Sample)?;
        let stats = EpochStats {
            iteration: self.iteration,
            episodes: self.buffer.len() + 1,
            updates: all.len(),
            model_loss: mean(all.iter().map(|s| s.model_loss)),
            actor_loss: mean(all.iter().map(|s| s.actor_loss)),
            utility_loss: mean(all.iter().map(|s| s.utility_loss)),
            kl: mean(all.iter().map(|s| s.kl)),
            nce_bound: mean(all.iter().filter_map(|s| s.nce_bound)),
            recon_nll: mean(all.iter().filter_map(|s| s.recon_nll)),
            reward_loss: mean(all.iter().filter_map(|s| s.reward_loss)),
            episode_return: ep.total_reward(),
            episode_steps: ep.transitions(),
            seconds_per_update: (!all.is_empty()).then(|| elapsed / all.len() as f64),
        };
        self.buffer.push(ep)?;
        self.iteration += 1;
        Ok(stats)
    }

    fn dump_divergence(&self, update: usize, err: &Error, last: Option<&UpdateStats>) -> Result<()> {
        log::error!("iteration {} update {update}: {err}", self.iteration);
        if let Some(dir) = &self.run_dir {
            fs::create_dir_all(dir)?;
            let dump = serde_json::json!({
                "iteration": self.iteration,
                "update": update,
                "error": err.to_string(),
                "last_stats": last,
                "episodes": self.buffer.len(),
            });
            fs::write(dir.join("divergence.json"), serde_json::to_vec_pretty(&dump)?)?;
        }
        Ok(())
    }

    /// Seeds if needed, then iterates until the configured budget, logging
    /// one JSON line per iteration and checkpointing on cadence.
    pub fn run(&mut self) -> Result<Vec<EpochStats>> {
        self.seed_buffer()?;
        if let Some(dir) = &self.run_dir {
            fs::create_dir_all(dir)?;
            self.buffer.save_dir(dir.join("episodes"))?;
        }
        let mut out = Vec::new();
        while self.iteration < self.train.iterations {
            let stats = self.train_iteration()?;
            log::info!(
                "iter {} episodes {} return {:.3} model {:?} kl {:?}",
                stats.iteration,
                stats.episodes,
                stats.episode_return,
                stats.model_loss,
                stats.kl
            );
            if let Some(dir) = &self.run_dir {
                let mut f = OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
                writeln!(f, "{}", serde_json::to_string(&stats)?)?;
                if self.iteration.is_multiple_of(self.train.checkpoint_every) || self.iteration == self.train.iterations {
                    self.save_checkpoint()?;
                }
            }
            out.push(stats);
        }
        if self.train.iterations == 0 && self.run_dir.is_some() {
            self.save_checkpoint()?;
        }
        Ok(out)
    }

    pub fn checkpoint_meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            version: CHECKPOINT_VERSION,
            fingerprint: config_fingerprint(&self.task, &self.agent.config)?,
            task: self.task.clone(),
            agent: self.agent.config.clone(),
            training: self.train.clone(),
            seed: self.seed,
            iteration: self.iteration,
            episodes: self.buffer.len(),
            rngs: self.rngs.clone(),
        })
    }

    /// Writes parameters, optimizer state, new episodes and metadata.
    pub fn save_checkpoint(&self) -> Result<()> {
        let dir = self
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::Config("no run directory configured for checkpoints".into()))?;
        self.buffer.save_dir(dir.join("episodes"))?;
        let ckpt = dir.join("checkpoint");
        self.agent.save(&ckpt)?;
        let meta = serde_json::to_vec_pretty(&self.checkpoint_meta()?)?;
        let tmp = ckpt.join("checkpoint.json.tmp");
        fs::write(&tmp, meta)?;
        fs::rename(tmp, ckpt.join("checkpoint.json"))?;
        Ok(())
    }

    pub fn read_meta(run_dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
        let path = run_dir.as_ref().join("checkpoint").join("checkpoint.json");
        let bytes = fs::read(&path).map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
        }
        if meta.fingerprint != config_fingerprint(&meta.task, &meta.agent)? {
            return Err(Error::Checkpoint("checkpoint fingerprint does not match its configuration".into()));
        }
        Ok(meta)
    }

    /// Restores a run; `train` may extend the iteration budget.
    pub fn resume(run_dir: impl AsRef<Path>, train: Option<TrainConfig>) -> Result<Self> {
        let run_dir = run_dir.as_ref().to_path_buf();
        let meta = Self::read_meta(&run_dir)?;
        let mut t = Self::new(
            meta.task.clone(),
            meta.agent.clone(),
            train.unwrap_or(meta.training.clone()),
            meta.seed,
            Some(run_dir.clone()),
        )?;
        t.agent.load(run_dir.join("checkpoint"))?;
        t.buffer = ReplayBuffer::load_dir(run_dir.join("episodes"), t.buffer.action_dim(), meta.episodes)?;
        t.iteration = meta.iteration;
        t.rngs = meta.rngs;
        Ok(t)
    }

    /// Builds an agent from a checkpoint, checking it against an expected
    /// configuration when one is given.
    pub fn load_agent(run_dir: impl AsRef<Path>, expected: Option<(&TaskSpec, &AgentConfig)>) -> Result<(Agent, CheckpointMeta)> {
        let meta = Self::read_meta(&run_dir)?;
        if let Some((task, agent)) = expected {
            if config_fingerprint(task, agent)? != meta.fingerprint {
                return Err(Error::Checkpoint("checkpoint was trained with a different configuration".into()));
            }
        }
        let probe = meta.task.build(meta.seed)?;
        let mut init = ChaCha8Rng::seed_from_u64(meta.seed);
        let mut agent = Agent::new(meta.agent.clone(), probe.action_space(), probe.goal(), DType::F32, &mut init)?;
        agent.load(run_dir.as_ref().join("checkpoint"))?;
        Ok((agent, meta))
    }
}

/// Mean and population standard deviation of evaluation returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub std_return: Option<f64>,
    pub returns: Vec<f64>,
}

/// Runs `n` episodes with the deterministic policy mode.
pub fn evaluate(agent: &Agent, task: &TaskSpec, n: usize, seed: u64) -> Result<EvalSummary> {
    let mut returns = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let mut env = task.build(episode_seed(seed ^ 0x5eed_e7a1, i as u64))?;
        let mut obs = env.reset();
        let mut filter = agent.new_filter()?;
        let mut total = 0.0;
        loop {
            let a = agent.act(&mut filter, &obs, ActMode::Mode, &mut rng)?;
            let r = env.step(&a)?;
            total += r.reward as f64;
            obs = r.observation;
            if r.done {
                break;
            }
        }
        returns.push(total);
    }
    let mean_return = mean(returns.iter().copied());
    let std_return = mean_return.map(|m| (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n as f64).sqrt());
    Ok(EvalSummary { episodes: n, mean_return, std_return, returns })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_grid_settings() {
        let t = TrainConfig::default();
        assert_eq!((t.batch_size, t.seq_len, t.seed_episodes, t.updates_per_iteration), (50, 7, 50, 100));
        t.validate().unwrap();
        assert!(TrainConfig { batch_size: 1, seq_len: 1, ..t.clone() }.validate().is_err());
    }

    #[test]
    fn rng_streams_differ_and_serialize() {
        use rand::Rng;
        let mut s = RngStreams::new(4);
        let a: u64 = s.sample.random();
        let b: u64 = s.model.random();
        assert_ne!(a, b);
        let json = serde_json::to_string(&s).unwrap();
        let mut back: RngStreams = serde_json::from_str(&json).unwrap();
        assert_eq!(back.act.random::<u64>(), s.act.random::<u64>());
    }

    #[test]
    fn episode_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| episode_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
