//! Experiment configuration files.
//!
//! A config is TOML with five parts: `seeds` and the `[environment]`,
//! `[agent]`, `[training]` and `[output]` tables. Every key except
//! `agent.agent_kind` has a default; batch size, sequence length and
//! imagination horizon default to the reference settings of the chosen task
//! when left out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cai_core::agent::{AgentConfig, AgentKind, OptimConfig};
use cai_core::arch::ArchConfig;
use cai_core::behavior::ReturnConfig;
use cai_core::trainer::TrainConfig;
use cai_envs::{PreferencePrior, TaskSpec};

/// Environment variable that overrides `output.root`.
pub const RUNS_ROOT_VAR: &str = "CAI_RUNS_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("--set {0}: expected dotted.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One run per seed, each in its own subdirectory.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub environment: TaskSpec,
    pub agent: AgentBlock,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentBlock {
    pub agent_kind: AgentKind,
    #[serde(default)]
    pub preference: PreferencePrior,
    #[serde(default)]
    pub include_intrinsic: bool,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub returns: ReturnsBlock,
    #[serde(default)]
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnsBlock {
    pub gamma: f64,
    pub lambda: f64,
    /// Task preset when absent: 6 on the 6×6 grid, 10 elsewhere.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    pub entropy_scale: f64,
}

impl Default for ReturnsBlock {
    fn default() -> Self {
        let r = ReturnConfig::default();
        Self { gamma: r.gamma, lambda: r.lambda, horizon: None, entropy_scale: r.entropy_scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingBlock {
    pub seed_episodes: usize,
    pub updates_per_iteration: usize,
    /// Task preset when absent: 50 on grids, 30 on the reacher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Task preset when absent: 7 on the 6×6 grid, 11 on 8×8, 30 on the reacher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    pub iterations: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed_episodes: t.seed_episodes,
            updates_per_iteration: t.updates_per_iteration,
            batch_size: None,
            seq_len: None,
            iterations: t.iterations,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    /// Parent of all run directories; `CAI_RUNS_DIR` takes precedence.
    pub root: PathBuf,
    /// Experiment directory name; derived from task and agent when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Log level passed to the logger when `RUST_LOG` is unset.
    pub log_level: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { root: PathBuf::from("runs"), name: None, log_level: "info".into() }
    }
}

/// Reference (batch size, sequence length, horizon) for a task.
pub fn task_preset(task: &TaskSpec) -> (usize, usize, usize) {
    match task {
        TaskSpec::Grid { size: 8 } => (50, 11, 10),
        TaskSpec::Grid { .. } => (50, 7, 6),
        TaskSpec::Reacher { .. } => (30, 30, 10),
    }
}

fn task_label(task: &TaskSpec) -> String {
    match task {
        TaskSpec::Grid { size } => format!("grid{size}"),
        TaskSpec::Reacher { distraction, .. } if distraction.enabled => "reacher-distracted".into(),
        TaskSpec::Reacher { .. } => "reacher".into(),
    }
}

impl ExperimentConfig {
    pub fn new(kind: AgentKind) -> Self {
        Self {
            seeds: default_seeds(),
            environment: TaskSpec::default(),
            agent: AgentBlock {
                agent_kind: kind,
                preference: PreferencePrior::default(),
                include_intrinsic: false,
                arch: ArchConfig::default(),
                returns: ReturnsBlock::default(),
                optim: OptimConfig::default(),
            },
            training: TrainingBlock::default(),
            output: OutputBlock::default(),
        }
    }

    /// Parses TOML text after applying `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        // The grid is the default task, also when only some of its keys are given.
        if let Some(toml::Value::Table(env)) = value.get_mut("environment") {
            env.entry("task").or_insert_with(|| toml::Value::String("grid".into()));
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text, overrides).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: cai_core::Error| ConfigError::Invalid(e.to_string());
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::Invalid("seeds must be distinct".into()));
        }
        self.environment.build(0).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let (agent, train) = self.resolve();
        agent.arch.validate().map_err(invalid)?;
        agent.returns.validate().map_err(invalid)?;
        train.validate().map_err(invalid)?;
        Ok(())
    }

    /// Agent and training settings with task presets filled in.
    pub fn resolve(&self) -> (AgentConfig, TrainConfig) {
        let (b, l, h) = task_preset(&self.environment);
        let a = &self.agent;
        let agent = AgentConfig {
            kind: a.agent_kind,
            arch: a.arch.clone(),
            returns: ReturnConfig {
                gamma: a.returns.gamma,
                lambda: a.returns.lambda,
                horizon: a.returns.horizon.unwrap_or(h),
                entropy_scale: a.returns.entropy_scale,
            },
            optim: a.optim.clone(),
            preference: a.preference,
            include_intrinsic: a.include_intrinsic,
        };
        let t = &self.training;
        let train = TrainConfig {
            seed_episodes: t.seed_episodes,
            updates_per_iteration: t.updates_per_iteration,
            batch_size: t.batch_size.unwrap_or(b),
            seq_len: t.seq_len.unwrap_or(l),
            iterations: t.iterations,
            checkpoint_every: t.checkpoint_every,
        };
        (agent, train)
    }

    /// Directory holding every seed of this experiment.
    pub fn experiment_dir(&self) -> PathBuf {
        let root = std::env::var_os(RUNS_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| self.output.root.clone());
        let name = self
            .output
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-{}", task_label(&self.environment), self.agent.agent_kind.name()));
        root.join(name)
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.experiment_dir().join(format!("seed{seed}"))
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as TOML and
/// taken as a bare string when that fails.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{spec} ({p} is not a table)")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// A commented config with every default spelled out.
pub fn documented_defaults(kind: AgentKind) -> String {
    let cfg = ExperimentConfig::new(kind);
    let (b, l, h) = task_preset(&cfg.environment);
    format!(
        "# Experiment configuration. Every key is optional except agent.agent_kind.\n\
         # Override any key on the command line with --set dotted.key=value.\n\
         #\n\
         # [environment] task = \"grid\" (size = 6 or 8) or task = \"reacher\"\n\
         #   (difficulty = \"easy\" | \"hard\", max_episode_steps, [environment.distraction]).\n\
         # Task presets used when a key is absent (batch_size, seq_len, horizon):\n\
         #   grid 6x6 = (50, 7, 6), grid 8x8 = (50, 11, 10), reacher = (30, 30, 10).\n\
         # training.batch_size = {b}, training.seq_len = {l} and agent.returns.horizon = {h}\n\
         # for the task below.\n\
         # [output] root is replaced by ${RUNS_ROOT_VAR} when that variable is set.\n\n{}",
        cfg.to_toml()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_defaults_match_reference_settings() {
        let cfg = ExperimentConfig::parse("[agent]\nagent_kind = \"contrastive-aif\"\n", &[]).unwrap();
        let (agent, train) = cfg.resolve();
        assert_eq!((train.batch_size, train.seq_len, agent.returns.horizon), (50, 7, 6));
        assert_eq!((train.seed_episodes, train.updates_per_iteration), (50, 100));
        assert_eq!(agent.kind, AgentKind::ContrastiveAif);
    }

    #[test]
    fn presets_follow_task() {
        let cfg = ExperimentConfig::parse(
            "[environment]\ntask = \"reacher\"\n[agent]\nagent_kind = \"dreamer\"\n",
            &[],
        )
        .unwrap();
        let (agent, train) = cfg.resolve();
        assert_eq!((train.batch_size, train.seq_len, agent.returns.horizon), (30, 30, 10));
        let cfg = ExperimentConfig::parse("[agent]\nagent_kind = \"dreamer\"\n", &["environment.size=8".into()]).unwrap();
        assert_eq!(cfg.resolve().1.seq_len, 11);
    }

    #[test]
    fn missing_kind_names_the_field() {
        let err = ExperimentConfig::parse("[agent]\n", &[]).unwrap_err().to_string();
        assert!(err.contains("agent_kind"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("[agent]\nagent_kind = \"dreamer\"\nlearning_rate = 1\n", &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(ExperimentConfig::parse("[agent]\nagent_kind = \"dreamer\"\n[training]\nbatchsize = 3\n", &[]).is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::parse(
            "[agent]\nagent_kind = \"dreamer\"\n",
            &[
                "agent.agent_kind=likelihood-aif".into(),
                "agent.arch.stoch=12".into(),
                "training.batch_size=4".into(),
                "seeds=[3, 4]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.agent.agent_kind, AgentKind::LikelihoodAif);
        assert_eq!(cfg.agent.arch.stoch, 12);
        assert_eq!(cfg.training.batch_size, Some(4));
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert!(ExperimentConfig::parse("[agent]\nagent_kind = \"dreamer\"\n", &["novalue".into()]).is_err());
    }

    #[test]
    fn semantic_errors_are_reported() {
        let base = "[agent]\nagent_kind = \"dreamer\"\n";
        assert!(ExperimentConfig::parse(base, &["seeds=[]".into()]).is_err());
        assert!(ExperimentConfig::parse(base, &["environment.size=7".into()]).is_err());
        assert!(ExperimentConfig::parse(base, &["agent.returns.horizon=0".into()]).is_err());
    }

    #[test]
    fn documented_defaults_parse_back() {
        for kind in AgentKind::ALL {
            let text = documented_defaults(kind);
            let cfg = ExperimentConfig::parse(&text, &[]).unwrap();
            assert_eq!(cfg, ExperimentConfig::new(kind));
        }
    }
}
