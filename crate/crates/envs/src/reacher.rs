//! Planar two-link reacher with a fixed target disc.
//!
//! The arm is driven by joint torques and integrated with semi-implicit Euler
//! (dt = 0.02 s, viscous damping 0.05, no gravity). A step yields reward 1
//! when the tip disc lies entirely inside the target disc. Episodes run for a
//! fixed number of steps.
//!
//! With distractions enabled, each episode draws an animated procedural
//! background, a small camera rotation and a colour offset for the arm and
//! target. Distractions only touch pixels; the dynamics never see them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::goal::{GoalSpec, PreferencePrior};
use crate::observation::{Observation, OBS_HEIGHT, OBS_WIDTH};
use crate::{
    Action, ActionSpace, EnvError, Environment, EpisodeMeta, PomdpConfig, Result, StepResult,
};

pub const EPISODE_STEPS: usize = 1000;
pub const DT: f64 = 0.02;
pub const DAMPING: f64 = 0.05;
pub const LINK_LENGTHS: [f64; 2] = [0.56, 0.28];
pub const LINK_MASSES: [f64; 2] = [1.0, 0.5];
/// Torque produced by a unit action on each joint.
pub const GEAR: [f64; 2] = [1.0, 0.1];
pub const TIP_RADIUS: f64 = 0.05;
pub const TARGET_POS: [f64; 2] = [0.45, -0.45];
pub const NUM_BACKGROUNDS: u8 = 4;

const LINK_HALF_WIDTH: f64 = 0.045;
const VIEW_HALF_EXTENT: f64 = 1.1;

const PLAIN_BG: [u8; 3] = [38, 66, 128];
const PLAIN_BG_LINE: [u8; 3] = [52, 84, 150];
const ARM: [u8; 3] = [222, 190, 140];
const TIP: [u8; 3] = [255, 140, 0];
const TARGET: [u8; 3] = [200, 40, 70];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    #[default]
    Easy,
    Hard,
}

impl Difficulty {
    pub fn target_radius(self) -> f64 {
        match self {
            Difficulty::Easy => 0.2,
            Difficulty::Hard => 0.1,
        }
    }
}

/// Ranges for per-episode nuisance variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractionConfig {
    pub enabled: bool,
    /// Forces a specific background instead of drawing one per episode.
    pub background_id: Option<u8>,
    /// Maximum absolute camera rotation, radians.
    pub camera_jitter: f64,
    /// Maximum absolute per-channel colour offset for arm and target.
    pub palette_shift: u8,
    pub per_episode_reseed: bool,
}

impl Default for DistractionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            background_id: None,
            camera_jitter: 0.1,
            palette_shift: 25,
            per_episode_reseed: true,
        }
    }
}

impl DistractionConfig {
    pub fn easy() -> Self {
        Self { enabled: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(id) = self.background_id {
            if id >= NUM_BACKGROUNDS {
                return Err(EnvError::Config(format!(
                    "background_id must be < {NUM_BACKGROUNDS}, got {id}"
                )));
            }
        }
        if !(self.camera_jitter >= 0.0 && self.camera_jitter.is_finite()) {
            return Err(EnvError::Config("camera_jitter must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DistractionSample {
        let background_id = self
            .background_id
            .unwrap_or_else(|| rng.random_range(0..NUM_BACKGROUNDS));
        let camera_angle = if self.camera_jitter > 0.0 {
            rng.random_range(-self.camera_jitter..=self.camera_jitter)
        } else {
            0.0
        };
        let s = self.palette_shift as i16;
        let mut palette = [0i16; 3];
        for p in &mut palette {
            *p = rng.random_range(-s..=s);
        }
        DistractionSample { background_id, camera_angle, palette, phase: rng.random_range(0.0..1.0) }
    }
}

/// One draw of the nuisance variables, fixed for an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractionSample {
    pub background_id: u8,
    pub camera_angle: f64,
    pub palette: [i16; 3],
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReacherState {
    pub joint_angles: [f64; 2],
    pub joint_velocities: [f64; 2],
    pub target_pos: [f64; 2],
    pub target_radius: f64,
    pub step_count: usize,
    pub done: bool,
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

impl ReacherState {
    pub fn at_pose(joint_angles: [f64; 2], difficulty: Difficulty) -> Self {
        Self {
            joint_angles: [wrap_angle(joint_angles[0]), wrap_angle(joint_angles[1])],
            joint_velocities: [0.0; 2],
            target_pos: TARGET_POS,
            target_radius: difficulty.target_radius(),
            step_count: 0,
            done: false,
        }
    }

    pub fn elbow(&self) -> [f64; 2] {
        let [q1, _] = self.joint_angles;
        [LINK_LENGTHS[0] * q1.cos(), LINK_LENGTHS[0] * q1.sin()]
    }

    pub fn tip(&self) -> [f64; 2] {
        let [q1, q2] = self.joint_angles;
        let e = self.elbow();
        [e[0] + LINK_LENGTHS[1] * (q1 + q2).cos(), e[1] + LINK_LENGTHS[1] * (q1 + q2).sin()]
    }

    pub fn tip_inside_target(&self) -> bool {
        let t = self.tip();
        let d = ((t[0] - self.target_pos[0]).powi(2) + (t[1] - self.target_pos[1]).powi(2)).sqrt();
        d + TIP_RADIUS < self.target_radius
    }

    /// Applies clamped torques for one integration step. Returns the reward.
    pub fn integrate(&mut self, torque: [f64; 2]) -> f32 {
        let [l1, l2] = LINK_LENGTHS;
        let [m1, m2] = LINK_MASSES;
        let (lc1, lc2) = (l1 / 2.0, l2 / 2.0);
        let (i1, i2) = (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0);
        let [_, q2] = self.joint_angles;
        let [dq1, dq2] = self.joint_velocities;
        let c2 = q2.cos();
        let m11 = m1 * lc1 * lc1 + i1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i2;
        let m12 = m2 * (lc2 * lc2 + l1 * lc2 * c2) + i2;
        let m22 = m2 * lc2 * lc2 + i2;
        let h = m2 * l1 * lc2 * q2.sin();
        let bias = [-h * (2.0 * dq1 * dq2 + dq2 * dq2), h * dq1 * dq1];
        let rhs = [
            GEAR[0] * torque[0] - bias[0] - DAMPING * dq1,
            GEAR[1] * torque[1] - bias[1] - DAMPING * dq2,
        ];
        let det = m11 * m22 - m12 * m12;
        let acc = [(m22 * rhs[0] - m12 * rhs[1]) / det, (m11 * rhs[1] - m12 * rhs[0]) / det];
        for j in 0..2 {
            self.joint_velocities[j] += DT * acc[j];
            self.joint_angles[j] = wrap_angle(self.joint_angles[j] + DT * self.joint_velocities[j]);
        }
        if self.tip_inside_target() {
            1.0
        } else {
            0.0
        }
    }
}

/// Joint angles that put the tip on the target centre (elbow-down solution).
pub fn goal_pose() -> [f64; 2] {
    let [l1, l2] = LINK_LENGTHS;
    let [x, y] = TARGET_POS;
    let c2 = ((x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = y.atan2(x) - (l2 * q2.sin()).atan2(l1 + l2 * c2);
    [wrap_angle(q1), wrap_angle(q2)]
}

fn shift(c: [u8; 3], by: [i16; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| (c[i] as i16 + by[i]).clamp(0, 255) as u8)
}

fn hash2(x: i32, y: i32, seed: u32) -> f64 {
    let mut h = (x as u32).wrapping_mul(0x8da6_b343)
        ^ (y as u32).wrapping_mul(0xd816_3841)
        ^ seed.wrapping_mul(0xcb1a_b31f);
    h ^= h >> 13;
    h = h.wrapping_mul(0x5bd1_e995);
    h ^= h >> 15;
    (h & 0xffff) as f64 / 65535.0
}

fn value_noise(x: f64, y: f64, seed: u32) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let (ix, iy) = (x0 as i32, y0 as i32);
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

fn to_rgb(r: f64, g: f64, b: f64) -> [u8; 3] {
    [r, g, b].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Animated background colour at normalized pixel coordinates (u, v) ∈ [0,1)².
fn distractor_background(id: u8, u: f64, v: f64, t: f64, phase: f64) -> [u8; 3] {
    let tau = 2.0 * PI;
    match id {
        0 => {
            // drifting diagonal colour bands
            let s = ((u + v) * 3.0 + t * 0.35 + phase) * tau;
            to_rgb(0.5 + 0.4 * s.sin(), 0.45 + 0.35 * (s * 0.7 + 1.0).sin(), 0.3 + 0.3 * (s * 1.3).cos())
        }
        1 => {
            // scrolling value-noise clouds
            let n = value_noise(u * 6.0 + t * 0.8 + phase * 10.0, v * 6.0, 17);
            let m = value_noise(u * 12.0, v * 12.0 - t * 0.5 + phase * 7.0, 91);
            to_rgb(0.3 + 0.6 * n, 0.5 * m + 0.3 * n, 0.2 + 0.5 * (1.0 - n))
        }
        2 => {
            // expanding rings around a wandering centre
            let cx = 0.5 + 0.3 * (t * 0.2 + phase * tau).cos();
            let cy = 0.5 + 0.3 * (t * 0.27 + phase * tau).sin();
            let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let s = (r * 14.0 - t * 1.5) * tau / 2.0;
            to_rgb(0.55 + 0.45 * s.sin(), 0.35 + 0.25 * (s + 2.0).sin(), 0.6 + 0.3 * (s + 4.0).sin())
        }
        _ => {
            // moving checkerboard with noise
            let cu = ((u * 5.0 + t * 0.3 + phase).floor() as i64).rem_euclid(2);
            let cv = ((v * 5.0 - t * 0.2).floor() as i64).rem_euclid(2);
            let n = value_noise(u * 20.0, v * 20.0 + t, 5);
            let base = if cu == cv { 0.8 } else { 0.25 };
            to_rgb(base * 0.9 + 0.1 * n, base * 0.7 + 0.2 * n, base * 0.4 + 0.3 * n)
        }
    }
}

fn plain_background(x: f64, y: f64) -> [u8; 3] {
    let line = |c: f64| ((c + 1.2) / 0.3).fract() < 0.04;
    if line(x) || line(y) {
        PLAIN_BG_LINE
    } else {
        PLAIN_BG
    }
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Renders the arm, tip and target over the background. With `None` the
/// plain static background and nominal colours are used.
pub fn render(state: &ReacherState, distraction: Option<&DistractionSample>) -> Observation {
    let mut obs = Observation::filled(PLAIN_BG);
    let angle = distraction.map_or(0.0, |d| d.camera_angle);
    let palette = distraction.map_or([0; 3], |d| d.palette);
    let (sin_a, cos_a) = angle.sin_cos();
    let elbow = state.elbow();
    let tip = state.tip();
    let arm = shift(ARM, palette);
    let tip_color = shift(TIP, palette);
    let target = shift(TARGET, [palette[2], palette[0], palette[1]]);
    let t = state.step_count as f64 * DT;
    let px_size = 2.0 * VIEW_HALF_EXTENT / OBS_WIDTH as f64;
    for py in 0..OBS_HEIGHT {
        for px in 0..OBS_WIDTH {
            let sx = -VIEW_HALF_EXTENT + (px as f64 + 0.5) * px_size;
            let sy = VIEW_HALF_EXTENT - (py as f64 + 0.5) * px_size;
            // camera rotation: screen point -> world point
            let p = [cos_a * sx + sin_a * sy, -sin_a * sx + cos_a * sy];
            let d_tip = ((p[0] - tip[0]).powi(2) + (p[1] - tip[1]).powi(2)).sqrt();
            let d_target =
                ((p[0] - state.target_pos[0]).powi(2) + (p[1] - state.target_pos[1]).powi(2)).sqrt();
            let on_arm = dist_to_segment(p, [0.0, 0.0], elbow) < LINK_HALF_WIDTH
                || dist_to_segment(p, elbow, tip) < LINK_HALF_WIDTH;
            let color = if d_tip < TIP_RADIUS {
                tip_color
            } else if on_arm {
                arm
            } else if d_target < state.target_radius {
                target
            } else {
                match distraction {
                    None => plain_background(p[0], p[1]),
                    Some(d) => distractor_background(
                        d.background_id,
                        px as f64 / OBS_WIDTH as f64,
                        py as f64 / OBS_HEIGHT as f64,
                        t,
                        d.phase,
                    ),
                }
            };
            obs.set(px, py, color);
        }
    }
    obs
}

/// Goal frame: tip centred in the target, plain background, no jitter.
pub fn goal_spec(difficulty: Difficulty, prior: PreferencePrior) -> GoalSpec {
    let state = ReacherState::at_pose(goal_pose(), difficulty);
    GoalSpec::new(render(&state, None), prior)
}

pub struct Reacher {
    config: PomdpConfig,
    difficulty: Difficulty,
    distraction: DistractionConfig,
    sample: Option<DistractionSample>,
    state: ReacherState,
    rng: ChaCha8Rng,
    episodes: u64,
    clamp_warnings: u64,
    prior: PreferencePrior,
}

impl Reacher {
    pub fn new(difficulty: Difficulty, distraction: DistractionConfig, seed: u64) -> Result<Self> {
        Self::with_episode_steps(difficulty, distraction, EPISODE_STEPS, seed)
    }

    pub fn with_episode_steps(
        difficulty: Difficulty,
        distraction: DistractionConfig,
        max_episode_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        distraction.validate()?;
        let config = PomdpConfig {
            action_space: ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 },
            max_episode_steps,
            discount: 0.99,
            seed,
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = distraction.enabled.then(|| distraction.sample(&mut rng));
        Ok(Self {
            config,
            difficulty,
            distraction,
            sample,
            state: ReacherState::at_pose([0.0, 0.0], difficulty),
            rng,
            episodes: 0,
            clamp_warnings: 0,
            prior: PreferencePrior::Laplace,
        })
    }

    pub fn with_prior(mut self, prior: PreferencePrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn state(&self) -> &ReacherState {
        &self.state
    }

    pub fn difficulty(&self) -> Difficulty {
        self.difficulty
    }

    pub fn distraction_sample(&self) -> Option<&DistractionSample> {
        self.sample.as_ref()
    }

    /// Number of actions that had to be clamped into [-1, 1].
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings
    }

    pub fn render_current(&self) -> Observation {
        render(&self.state, self.sample.as_ref())
    }
}

impl Environment for Reacher {
    fn config(&self) -> &PomdpConfig {
        &self.config
    }

    fn reset(&mut self) -> Observation {
        let q = [self.rng.random_range(-PI..PI), self.rng.random_range(-PI..PI)];
        self.state = ReacherState::at_pose(q, self.difficulty);
        if self.distraction.enabled && (self.distraction.per_episode_reseed || self.sample.is_none()) {
            self.sample = Some(self.distraction.sample(&mut self.rng));
        }
        self.episodes += 1;
        self.render_current()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.state.done {
            return Err(EnvError::Usage("step called on a finished reacher episode".into()));
        }
        let raw = match action {
            Action::Continuous(a) if a.len() == 2 => [a[0] as f64, a[1] as f64],
            _ => return Err(EnvError::Usage("reacher takes a 2-vector action".into())),
        };
        let torque = raw.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
        if torque != raw {
            self.clamp_warnings += 1;
            log::warn!("reacher action {raw:?} clamped to {torque:?}");
        }
        let reward = self.state.integrate(torque);
        self.state.step_count += 1;
        self.state.done = self.state.step_count >= self.config.max_episode_steps;
        Ok(StepResult { observation: self.render_current(), reward, done: self.state.done })
    }

    fn goal(&self) -> GoalSpec {
        goal_spec(self.difficulty, self.prior)
    }

    fn episode_meta(&self) -> EpisodeMeta {
        EpisodeMeta {
            seed: self.config.seed,
            episode_index: self.episodes,
            distraction: self.sample.clone(),
        }
    }
}
