//! Self-contained pixel environments used by the agents.
//!
//! Two tasks are provided, both rendering 64×64 RGB frames:
//!
//! * [`grid::GridWorld`]: an empty walled room seen through a 7×7 egocentric
//!   window, with a green goal tile in the corner opposite the start.
//! * [`reacher::Reacher`]: a planar two-link arm that must place its tip
//!   inside a fixed target disc, optionally with procedural background,
//!   camera and palette distractions.
//!
//! Every task also produces a [`GoalSpec`]: the preferred-outcome image and
//! the per-pixel density centred on it.

pub mod goal;
pub mod grid;
pub mod observation;
pub mod reacher;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use goal::{GoalSpec, PreferencePrior};
pub use grid::{GridAction, GridState, GridWorld, Heading};
pub use observation::{Observation, OBS_CHANNELS, OBS_HEIGHT, OBS_LEN, OBS_WIDTH};
pub use reacher::{
    Difficulty, DistractionConfig, DistractionSample, Reacher, ReacherState,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid observation: {0}")]
    Observation(String),
    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize, low: f32, high: f32 },
}

impl ActionSpace {
    /// Width of the vector fed to the models: `n` for a one-hot discrete
    /// action, `dim` otherwise.
    pub fn encoded_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }

    /// Encodes an action as the model input vector.
    pub fn encode(&self, action: &Action) -> Vec<f32> {
        match (*self, action) {
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => {
                let mut v = vec![0.0; n];
                if *i < n {
                    v[*i] = 1.0;
                }
                v
            }
            (ActionSpace::Continuous { dim, .. }, Action::Continuous(a)) => {
                let mut v = a.clone();
                v.resize(dim, 0.0);
                v
            }
            (space, _) => vec![0.0; space.encoded_dim()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f32>),
}

/// Static description of a partially observable task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PomdpConfig {
    pub action_space: ActionSpace,
    pub max_episode_steps: usize,
    pub discount: f64,
    pub seed: u64,
}

impl PomdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_episode_steps == 0 {
            return Err(EnvError::Config("max_episode_steps must be >= 1".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(EnvError::Config(format!(
                "discount must lie in (0, 1), got {}",
                self.discount
            )));
        }
        if let ActionSpace::Continuous { low, high, dim } = self.action_space {
            if dim == 0 || low >= high {
                return Err(EnvError::Config("empty continuous action space".into()));
            }
        }
        if let ActionSpace::Discrete { n: 0 } = self.action_space {
            return Err(EnvError::Config("discrete action space with no actions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f32,
    pub done: bool,
}

/// Nuisance parameters of the current episode, stored alongside replayed
/// episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub episode_index: u64,
    pub distraction: Option<DistractionSample>,
}

/// Common interface of the environments, used by data collection.
pub trait Environment: Send {
    fn config(&self) -> &PomdpConfig;

    fn action_space(&self) -> ActionSpace {
        self.config().action_space
    }

    fn max_episode_steps(&self) -> usize {
        self.config().max_episode_steps
    }

    fn reset(&mut self) -> Observation;

    fn step(&mut self, action: &Action) -> Result<StepResult>;

    /// Preferred outcome for this task.
    fn goal(&self) -> GoalSpec;

    fn episode_meta(&self) -> EpisodeMeta;

    /// Uniformly random action, drawn from the caller's generator.
    fn random_action(&self, rng: &mut dyn rand::RngCore) -> Action {
        use rand::Rng;
        match self.action_space() {
            ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
            ActionSpace::Continuous { dim, low, high } => Action::Continuous(
                (0..dim).map(|_| rng.random_range(low..=high)).collect(),
            ),
        }
    }
}

/// Task selection, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Grid {
        #[serde(default = "default_grid_size")]
        size: usize,
    },
    Reacher {
        #[serde(default)]
        difficulty: Difficulty,
        #[serde(default)]
        distraction: DistractionConfig,
        #[serde(default = "default_reacher_steps")]
        max_episode_steps: usize,
    },
}

fn default_grid_size() -> usize {
    6
}

fn default_reacher_steps() -> usize {
    reacher::EPISODE_STEPS
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Grid { size: 6 }
    }
}

impl TaskSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>> {
        Ok(match self {
            TaskSpec::Grid { size } => Box::new(GridWorld::new(*size, seed)?),
            TaskSpec::Reacher {
                difficulty,
                distraction,
                max_episode_steps,
            } => Box::new(Reacher::with_episode_steps(
                *difficulty,
                distraction.clone(),
                *max_episode_steps,
                seed,
            )?),
        })
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, TaskSpec::Grid { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pomdp_config_rejects_bad_values() {
        let mut cfg = PomdpConfig {
            action_space: ActionSpace::Discrete { n: 3 },
            max_episode_steps: 10,
            discount: 0.99,
            seed: 0,
        };
        assert!(cfg.validate().is_ok());
        cfg.max_episode_steps = 0;
        assert!(cfg.validate().is_err());
        cfg.max_episode_steps = 1;
        cfg.discount = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_hot_encoding() {
        let space = ActionSpace::Discrete { n: 3 };
        assert_eq!(space.encode(&Action::Discrete(1)), vec![0.0, 1.0, 0.0]);
        let space = ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 };
        assert_eq!(space.encode(&Action::Continuous(vec![0.5, -0.5])), vec![0.5, -0.5]);
    }

    #[test]
    fn task_spec_builds_both_envs() {
        let grid = TaskSpec::Grid { size: 8 }.build(1).unwrap();
        assert_eq!(grid.max_episode_steps(), 256);
        let reacher = TaskSpec::Reacher {
            difficulty: Difficulty::Hard,
            distraction: DistractionConfig::default(),
            max_episode_steps: 1000,
        }
        .build(1)
        .unwrap();
        assert!(!reacher.action_space().is_discrete());
        assert!(TaskSpec::Grid { size: 7 }.build(0).is_err());
    }
}
