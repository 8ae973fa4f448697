//! Empty walled room with a partial egocentric view.
//!
//! The room is `size × size` cells including the outer walls. The agent
//! starts in the top-left interior cell facing east and the goal sits in the
//! bottom-right interior cell. The agent sees a 7×7 window in which it
//! occupies the bottom-centre tile, always drawn pointing up.

use serde::{Deserialize, Serialize};

use crate::goal::{GoalSpec, PreferencePrior};
use crate::observation::{Observation, OBS_HEIGHT, OBS_WIDTH};
use crate::{
    Action, ActionSpace, EnvError, Environment, EpisodeMeta, PomdpConfig, Result, StepResult,
};

pub const VIEW_SIZE: i32 = 7;
pub const SUPPORTED_SIZES: [usize; 2] = [6, 8];

const WALL: [u8; 3] = [100, 100, 100];
const FLOOR: [u8; 3] = [0, 0, 0];
const GRID_LINE: [u8; 3] = [45, 45, 45];
const GOAL: [u8; 3] = [0, 255, 0];
const AGENT: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    East,
    South,
    West,
    North,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::East, Heading::South, Heading::West, Heading::North];

    /// Unit step in screen coordinates (y grows downward).
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
            Heading::North => (0, -1),
        }
    }

    pub fn turn_left(self) -> Self {
        match self {
            Heading::East => Heading::North,
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
        }
    }

    pub fn turn_right(self) -> Self {
        match self {
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
            Heading::North => Heading::East,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
}

impl GridAction {
    pub const COUNT: usize = 3;

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(GridAction::TurnLeft),
            1 => Some(GridAction::TurnRight),
            2 => Some(GridAction::Forward),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub grid_size: usize,
    pub agent_pos: (i32, i32),
    pub agent_dir: Heading,
    pub goal_pos: (i32, i32),
    pub step_count: usize,
    pub done: bool,
}

/// Episode horizon for a room of the given size.
pub fn max_episode_steps(size: usize) -> usize {
    4 * size * size
}

/// Reward for reaching the goal after `steps_taken` steps.
pub fn goal_reward(steps_taken: usize, max_steps: usize) -> f32 {
    1.0 - 0.9 * (steps_taken as f32 / max_steps as f32)
}

impl GridState {
    pub fn reset(size: usize) -> Result<Self> {
        if !SUPPORTED_SIZES.contains(&size) {
            return Err(EnvError::Config(format!(
                "unsupported grid size {size}; expected one of {SUPPORTED_SIZES:?}"
            )));
        }
        let far = size as i32 - 2;
        Ok(Self {
            grid_size: size,
            agent_pos: (1, 1),
            agent_dir: Heading::East,
            goal_pos: (far, far),
            step_count: 0,
            done: false,
        })
    }

    /// A state with the agent placed at an arbitrary interior pose.
    pub fn with_pose(size: usize, pos: (i32, i32), dir: Heading) -> Result<Self> {
        let mut s = Self::reset(size)?;
        if !s.is_interior(pos) {
            return Err(EnvError::Config(format!("pose {pos:?} is not an interior cell")));
        }
        s.agent_pos = pos;
        s.agent_dir = dir;
        Ok(s)
    }

    pub fn is_interior(&self, (x, y): (i32, i32)) -> bool {
        let hi = self.grid_size as i32 - 1;
        x > 0 && y > 0 && x < hi && y < hi
    }

    /// Interior cells in row-major order.
    pub fn interior_cells(&self) -> Vec<(i32, i32)> {
        let hi = self.grid_size as i32 - 1;
        (1..hi).flat_map(|y| (1..hi).map(move |x| (x, y))).collect()
    }

    /// Advances the state by one action. Returns the reward and whether the
    /// episode ended.
    pub fn step(&mut self, action: GridAction, max_steps: usize) -> Result<(f32, bool)> {
        if self.done {
            return Err(EnvError::Usage("step called on a finished grid episode".into()));
        }
        let steps_taken = self.step_count;
        match action {
            GridAction::TurnLeft => self.agent_dir = self.agent_dir.turn_left(),
            GridAction::TurnRight => self.agent_dir = self.agent_dir.turn_right(),
            GridAction::Forward => {
                let (dx, dy) = self.agent_dir.delta();
                let next = (self.agent_pos.0 + dx, self.agent_pos.1 + dy);
                if self.is_interior(next) {
                    self.agent_pos = next;
                }
            }
        }
        self.step_count += 1;
        let mut reward = 0.0;
        if action == GridAction::Forward && self.agent_pos == self.goal_pos {
            reward = goal_reward(steps_taken, max_steps);
            self.done = true;
        } else if self.step_count >= max_steps {
            self.done = true;
        }
        Ok((reward, self.done))
    }

    /// World cell shown at view coordinates `(vx, vy)`; the agent is at
    /// `(3, 6)` looking toward `vy = 0`.
    fn view_to_world(&self, vx: i32, vy: i32) -> (i32, i32) {
        let forward = VIEW_SIZE - 1 - vy;
        let lateral = vx - VIEW_SIZE / 2;
        let (fx, fy) = self.agent_dir.delta();
        let (rx, ry) = self.agent_dir.turn_right().delta();
        (
            self.agent_pos.0 + forward * fx + lateral * rx,
            self.agent_pos.1 + forward * fy + lateral * ry,
        )
    }
}

fn in_agent_triangle(u: f32, v: f32) -> bool {
    // Arrow pointing toward the top of the tile.
    let (ax, ay) = (0.5, 0.12);
    let (bx, by) = (0.84, 0.88);
    let (cx, cy) = (0.16, 0.88);
    let side = |x1: f32, y1: f32, x2: f32, y2: f32| (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
    let d1 = side(ax, ay, bx, by);
    let d2 = side(bx, by, cx, cy);
    let d3 = side(cx, cy, ax, ay);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Egocentric 64×64 rendering of the 7×7 window in front of the agent.
pub fn render(state: &GridState) -> Observation {
    let mut obs = Observation::filled(FLOOR);
    let scale = VIEW_SIZE as f32 / OBS_WIDTH as f32;
    for py in 0..OBS_HEIGHT {
        let fy = (py as f32 + 0.5) * scale;
        let vy = fy.floor() as i32;
        let v = fy - vy as f32;
        for px in 0..OBS_WIDTH {
            let fx = (px as f32 + 0.5) * scale;
            let vx = fx.floor() as i32;
            let u = fx - vx as f32;
            let cell = state.view_to_world(vx, vy);
            let on_line = u < scale || v < scale;
            let mut color = if !state.is_interior(cell) {
                WALL
            } else if cell == state.goal_pos {
                GOAL
            } else if on_line {
                GRID_LINE
            } else {
                FLOOR
            };
            if vx == VIEW_SIZE / 2 && vy == VIEW_SIZE - 1 && in_agent_triangle(u, v) {
                color = AGENT;
            }
            obs.set(px, py, color);
        }
    }
    obs
}

/// The preferred outcome: the agent standing on the goal tile, facing east.
pub fn goal_spec(size: usize, prior: PreferencePrior) -> Result<GoalSpec> {
    let mut state = GridState::reset(size)?;
    state.agent_pos = state.goal_pos;
    state.agent_dir = Heading::East;
    Ok(GoalSpec::new(render(&state), prior))
}

pub fn is_goal_green(rgb: [u8; 3]) -> bool {
    rgb == GOAL
}

pub fn is_agent_red(rgb: [u8; 3]) -> bool {
    rgb == AGENT
}

pub struct GridWorld {
    config: PomdpConfig,
    state: GridState,
    episodes: u64,
    prior: PreferencePrior,
}

impl GridWorld {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        let state = GridState::reset(size)?;
        let config = PomdpConfig {
            action_space: ActionSpace::Discrete { n: GridAction::COUNT },
            max_episode_steps: max_episode_steps(size),
            discount: 0.99,
            seed,
        };
        config.validate()?;
        Ok(Self { config, state, episodes: 0, prior: PreferencePrior::Laplace })
    }

    pub fn with_prior(mut self, prior: PreferencePrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn size(&self) -> usize {
        self.state.grid_size
    }
}

impl Environment for GridWorld {
    fn config(&self) -> &PomdpConfig {
        &self.config
    }

    fn reset(&mut self) -> Observation {
        self.state = GridState::reset(self.state.grid_size).expect("size validated at construction");
        self.episodes += 1;
        render(&self.state)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        let a = match action {
            Action::Discrete(i) => GridAction::from_index(*i)
                .ok_or_else(|| EnvError::Usage(format!("grid action index {i} out of range")))?,
            Action::Continuous(_) => {
                return Err(EnvError::Usage("grid world takes discrete actions".into()))
            }
        };
        let (reward, done) = self.state.step(a, self.config.max_episode_steps)?;
        Ok(StepResult { observation: render(&self.state), reward, done })
    }

    fn goal(&self) -> GoalSpec {
        goal_spec(self.state.grid_size, self.prior).expect("size validated at construction")
    }

    fn episode_meta(&self) -> EpisodeMeta {
        EpisodeMeta { seed: self.config.seed, episode_index: self.episodes, distraction: None }
    }
}
