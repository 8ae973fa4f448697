//! Diagnostics over trained agents: tile utility heatmaps, normalized pose
//! utilities, critic goal scores, static cost reports, relative update times,
//! reconstructions and reward curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cai_envs::grid::{self, GridState, Heading};
use cai_envs::reacher::{self, DistractionSample, ReacherState};
use cai_envs::{Difficulty, Observation, TaskSpec};

use crate::agent::{observations_tensor, Agent, AgentConfig, AgentKind};
use crate::arch::{contrastive_path, likelihood_path, ArchConfig, LayerSpec, PathCost};
use crate::dist::GaussianParams;
use crate::replay::{EpisodeRecord, ReplayBuffer};
use crate::trainer::{episode_seed, EpochStats};
use crate::world_model::State;
use crate::{Error, Result};

/// Filtering steps on a repeated frame before reading the state.
pub const WARMUP_STEPS: usize = 3;

fn image_err(e: image::ImageError) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Posterior states after filtering each observation `steps` times with a
/// zero previous action, using posterior means.
pub fn warm_states(agent: &Agent, obs: &Tensor, steps: usize) -> Result<(State, GaussianParams)> {
    let model = agent.model();
    let n = obs.dims()[0];
    let embed = model.encode(obs)?;
    let action = Tensor::zeros((n, model.action_dim()), agent.dtype(), &Device::Cpu)?;
    let mut state = model.initial_state(n)?;
    let mut prior = None;
    for _ in 0..steps.max(1) {
        let (s, _post, p) = model.obs_step(&state, &action, &embed, None)?;
        state = s.detach();
        prior = Some(p.detach());
    }
    Ok((state, prior.expect("at least one filtering step")))
}

/// Utility of each observation's warmed-up state, higher is better. The
/// observations themselves serve as negatives for contrastive agents.
pub fn observation_utilities(agent: &Agent, observations: &[Observation]) -> Result<Vec<f64>> {
    if observations.is_empty() {
        return Ok(vec![]);
    }
    let refs: Vec<&Observation> = observations.iter().collect();
    let obs = observations_tensor(&refs, agent.dtype())?;
    let (state, prior) = warm_states(agent, &obs, WARMUP_STEPS)?;
    let u = agent.step_utility(&state, &prior, Some(&obs))?;
    Ok(to_f64(&u)?.into_iter().map(|v| -v).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileUtility {
    pub x: i32,
    pub y: i32,
    /// Indexed like `Heading::ALL`.
    pub per_heading: [f64; 4],
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub agent_kind: AgentKind,
    pub grid_size: usize,
    pub goal: (i32, i32),
    /// Interior tiles in row-major order.
    pub tiles: Vec<TileUtility>,
    /// Range of the per-tile means.
    pub min: f64,
    pub max: f64,
}

impl HeatmapReport {
    pub fn tile(&self, pos: (i32, i32)) -> Option<&TileUtility> {
        self.tiles.iter().find(|t| (t.x, t.y) == pos)
    }

    /// Fraction of tiles whose mean utility is strictly above the tile at `pos`.
    pub fn rank_fraction(&self, pos: (i32, i32)) -> Option<f64> {
        let v = self.tile(pos)?.mean;
        let above = self.tiles.iter().filter(|t| t.mean > v).count();
        Some(above as f64 / self.tiles.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,mean,max,east,south,west,north\n");
        for t in &self.tiles {
            let h = t.per_heading;
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", t.x, t.y, t.mean, t.max, h[0], h[1], h[2], h[3]);
        }
        s
    }

    /// Top-down map, darker tiles for higher mean utility, walls in blue
    /// and the goal tile outlined in green.
    pub fn to_image(&self, tile_px: u32) -> RgbImage {
        let n = self.grid_size as u32;
        let mut img = RgbImage::from_pixel(n * tile_px, n * tile_px, Rgb([60, 60, 150]));
        let span = self.max - self.min;
        for t in &self.tiles {
            let norm = if span > 0.0 { (t.mean - self.min) / span } else { 0.5 };
            let g = (255.0 * (1.0 - norm)).round().clamp(0.0, 255.0) as u8;
            let goal = (t.x, t.y) == self.goal;
            for dy in 0..tile_px {
                for dx in 0..tile_px {
                    let edge = dx < 2 || dy < 2 || dx + 2 >= tile_px || dy + 2 >= tile_px;
                    let c = if goal && edge { [0, 200, 0] } else { [g, g, g] };
                    img.put_pixel(t.x as u32 * tile_px + dx, t.y as u32 * tile_px + dy, Rgb(c));
                }
            }
        }
        img
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("heatmap.csv"), self.to_csv())?;
        fs::write(dir.join("heatmap.json"), serde_json::to_vec_pretty(self)?)?;
        self.to_image(32).save(dir.join("heatmap.png")).map_err(image_err)
    }
}

/// Utility of every (tile, heading) pose of a grid room, aggregated per tile.
pub fn grid_utility_heatmap(agent: &Agent, task: &TaskSpec) -> Result<HeatmapReport> {
    let TaskSpec::Grid { size } = *task else {
        return Err(Error::Config("the heatmap report is only defined for grid tasks".into()));
    };
    let base = GridState::reset(size)?;
    let cells = base.interior_cells();
    let mut observations = Vec::with_capacity(cells.len() * 4);
    for &pos in &cells {
        for dir in Heading::ALL {
            observations.push(grid::render(&GridState::with_pose(size, pos, dir)?));
        }
    }
    let values = observation_utilities(agent, &observations)?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite tile utility {bad}")));
    }
    let tiles: Vec<TileUtility> = cells
        .iter()
        .zip(values.chunks(4))
        .map(|(&(x, y), v)| {
            let per_heading = [v[0], v[1], v[2], v[3]];
            TileUtility {
                x,
                y,
                per_heading,
                mean: v.iter().sum::<f64>() / 4.0,
                max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let min = tiles.iter().map(|t| t.mean).fold(f64::INFINITY, f64::min);
    let max = tiles.iter().map(|t| t.mean).fold(f64::NEG_INFINITY, f64::max);
    Ok(HeatmapReport { agent_kind: agent.kind(), grid_size: size, goal: base.goal_pos, tiles, min, max })
}

/// Min-max normalization to [0, 1]. Returns `true` when the range is
/// degenerate, in which case every value maps to 0.5.
pub fn min_max_normalize(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return (vec![0.5; values.len()], true);
    }
    (values.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReacherPose {
    pub joint_angles: [f64; 2],
    /// Background drawn behind the arm, if any.
    pub background: Option<u8>,
}

impl ReacherPose {
    pub fn render(&self, difficulty: Difficulty) -> Observation {
        let state = ReacherState::at_pose(self.joint_angles, difficulty);
        let sample = self.background.map(plain_background);
        reacher::render(&state, sample.as_ref())
    }
}

/// A background with no camera or palette perturbation.
pub fn plain_background(background_id: u8) -> DistractionSample {
    DistractionSample { background_id, camera_angle: 0.0, palette: [0; 3], phase: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseUtilityTable {
    pub agent_kind: AgentKind,
    pub poses: Vec<ReacherPose>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub degenerate: bool,
}

impl PoseUtilityTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shoulder,elbow,background,raw,normalized\n");
        for ((p, r), n) in self.poses.iter().zip(&self.raw).zip(&self.normalized) {
            let bg = p.background.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{bg},{r},{n}", p.joint_angles[0], p.joint_angles[1]);
        }
        s
    }
}

/// Per-agent normalized utilities of rendered reacher poses.
pub fn pose_utility_table(agent: &Agent, poses: &[ReacherPose], difficulty: Difficulty) -> Result<PoseUtilityTable> {
    let observations: Vec<Observation> = poses.iter().map(|p| p.render(difficulty)).collect();
    let raw = observation_utilities(agent, &observations)?;
    let (normalized, degenerate) = min_max_normalize(&raw);
    if degenerate {
        log::warn!("pose utilities are constant; reporting 0.5 for every pose");
    }
    Ok(PoseUtilityTable { agent_kind: agent.kind(), poses: poses.to_vec(), raw, normalized, degenerate })
}

/// The goal pose followed by `n` poses with angles drawn uniformly.
pub fn sample_poses(n: usize, background: Option<u8>, seed: u64) -> Vec<ReacherPose> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = vec![ReacherPose { joint_angles: reacher::goal_pose(), background }];
    for _ in 0..n {
        let a = [rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)];
        poses.push(ReacherPose { joint_angles: a, background });
    }
    poses
}

/// Critic score `f(goal, s)` of each observation's warmed-up state.
pub fn goal_scores(agent: &Agent, observations: &[Observation]) -> Result<Vec<f64>> {
    let model = agent.model();
    let critic = model.critic()?;
    if observations.is_empty() {
        return Ok(vec![]);
    }
    let refs: Vec<&Observation> = observations.iter().collect();
    let obs = observations_tensor(&refs, agent.dtype())?;
    let (state, _) = warm_states(agent, &obs, WARMUP_STEPS)?;
    let goal = observations_tensor(&[&agent.goal().observation], agent.dtype())?;
    let goal_emb = critic.embed_obs(&model.encode(&goal)?)?;
    let scores = critic.embed_state(&state.z)?.matmul(&goal_emb.t()?)?;
    to_f64(&scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub likelihood: PathCost,
    pub contrastive: PathCost,
    pub mac_ratio: f64,
    pub param_ratio: f64,
}

pub fn efficiency_report(arch: &ArchConfig) -> EfficiencyReport {
    let likelihood = likelihood_path(arch);
    let contrastive = contrastive_path(arch);
    EfficiencyReport {
        likelihood,
        contrastive,
        mac_ratio: likelihood.macs as f64 / contrastive.macs as f64,
        param_ratio: likelihood.params as f64 / contrastive.params as f64,
    }
}

fn layer_line(out: &mut String, l: &LayerSpec) {
    let _ = writeln!(out, "  {:<40} {:>14} {:>12}", format!("{l:?}"), l.macs(), l.params());
}

impl EfficiencyReport {
    pub fn to_text(&self, arch: &ArchConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "representation path cost (one forward pass, one sample)");
        let _ = writeln!(s, "  {:<40} {:>14} {:>12}", "layer", "MACs", "params");
        let _ = writeln!(s, "likelihood (decoder)");
        arch.decoder_layers().iter().for_each(|l| layer_line(&mut s, l));
        let _ = writeln!(s, "contrastive (critic)");
        arch.critic_obs_layers()
            .iter()
            .chain(arch.critic_state_layers().iter())
            .for_each(|l| layer_line(&mut s, l));
        let _ = writeln!(s, "  {:<40} {:>14}", format!("{:?}", LayerSpec::Dot { dim: arch.embed_dim }), arch.embed_dim);
        let _ = writeln!(
            s,
            "likelihood  {:>10.3} MMACs {:>10.1}k params",
            self.likelihood.macs as f64 / 1e6,
            self.likelihood.params as f64 / 1e3
        );
        let _ = writeln!(
            s,
            "contrastive {:>10.3} MMACs {:>10.1}k params",
            self.contrastive.macs as f64 / 1e6,
            self.contrastive.params as f64 / 1e3
        );
        let _ = writeln!(s, "ratio       {:>10.2}x MACs {:>10.2}x params", self.mac_ratio, self.param_ratio);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallclockConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub horizon: usize,
    pub updates: usize,
    /// Untimed updates run first.
    pub warmup: usize,
    pub seed_episodes: usize,
    pub arch: ArchConfig,
    pub task: TaskSpec,
    pub seed: u64,
}

impl Default for WallclockConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            seq_len: 8,
            horizon: 5,
            updates: 100,
            warmup: 2,
            seed_episodes: 5,
            arch: ArchConfig::default(),
            task: TaskSpec::Grid { size: 6 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallclockEntry {
    pub kind: AgentKind,
    pub seconds_per_update: f64,
    /// Relative to dreamer when it was measured.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallclockReport {
    pub config: WallclockConfig,
    pub entries: Vec<WallclockEntry>,
}

impl WallclockReport {
    pub fn seconds(&self, kind: AgentKind) -> Option<f64> {
        self.entries.iter().find(|e| e.kind == kind).map(|e| e.seconds_per_update)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!("per-update wall time, B={} L={} H={} over {} updates\n", c.batch_size, c.seq_len, c.horizon, c.updates);
        for e in &self.entries {
            let ratio = e.ratio.map(|r| format!("{r:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "  {:<20} {:>9.4} s  {:>6}", e.kind.name(), e.seconds_per_update, ratio);
        }
        s
    }
}

/// Random-action episodes for timing and smoke tests.
pub fn random_buffer(task: &TaskSpec, episodes: usize, seed: u64) -> Result<ReplayBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer: Option<ReplayBuffer> = None;
    for i in 0..episodes {
        let mut env = task.build(episode_seed(seed, i as u64))?;
        let buf = buffer.get_or_insert_with(|| ReplayBuffer::new(env.action_space().encoded_dim()));
        let mut ep = EpisodeRecord::new(env.reset(), env.episode_meta());
        loop {
            let a = env.random_action(&mut rng);
            let r = env.step(&a)?;
            ep.push(env.action_space().encode(&a), r.reward, r.observation);
            if r.done {
                break;
            }
        }
        buf.push(ep)?;
    }
    buffer.ok_or_else(|| Error::Config("at least one episode is required".into()))
}

/// Mean per-update time of each agent kind on identical batches.
pub fn wallclock_report(config: &WallclockConfig, kinds: &[AgentKind]) -> Result<WallclockReport> {
    let buffer = random_buffer(&config.task, config.seed_episodes, config.seed)?;
    let probe = config.task.build(config.seed)?;
    let mut measured = Vec::new();
    for &kind in kinds {
        let mut cfg = AgentConfig::new(kind);
        cfg.arch = config.arch.clone();
        cfg.returns.horizon = config.horizon;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let mut agent = Agent::new(cfg, probe.action_space(), probe.goal(), DType::F32, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc10c);
        let mut total = 0.0;
        for u in 0..config.warmup + config.updates {
            let batch = buffer.sample_batch(config.batch_size, config.seq_len, DType::F32, &mut rng)?;
            let start = Instant::now();
            agent.update(&batch, &mut rng)?;
            if u >= config.warmup {
                total += start.elapsed().as_secs_f64();
            }
        }
        let secs = total / config.updates.max(1) as f64;
        log::info!("{kind}: {secs:.4} s/update");
        measured.push((kind, secs));
    }
    let dreamer = measured.iter().find(|(k, _)| *k == AgentKind::Dreamer).map(|&(_, s)| s);
    let entries = measured
        .into_iter()
        .map(|(kind, s)| WallclockEntry { kind, seconds_per_update: s, ratio: dreamer.map(|d| s / d) })
        .collect();
    Ok(WallclockReport { config: config.clone(), entries })
}

/// Ground-truth frames above posterior reconstructions, two rows per
/// episode, at most `frames` columns.
pub fn reconstruction_dump(agent: &Agent, episodes: &[EpisodeRecord], frames: usize) -> Result<RgbImage> {
    let model = agent.model();
    let decoder = model.decoder().map_err(|_| {
        Error::Config(format!("{} agents have no observation decoder to reconstruct with", agent.kind()))
    })?;
    let cols = episodes.iter().map(|e| e.steps().min(frames)).max().unwrap_or(0) as u32;
    let size = crate::arch::IMAGE_SIZE as u32;
    let mut img = RgbImage::from_pixel(cols.max(1) * size, (2 * episodes.len()).max(1) as u32 * size, Rgb([255, 255, 255]));
    let a = model.action_dim();
    for (row, ep) in episodes.iter().enumerate() {
        let mut state = model.initial_state(1)?;
        for t in 0..ep.steps().min(frames) {
            let prev = if t == 0 { vec![0f32; a] } else { ep.actions[t - 1].clone() };
            let action = Tensor::from_vec(prev, (1, a), &Device::Cpu)?.to_dtype(agent.dtype())?;
            let obs = observations_tensor(&[&ep.observations[t]], agent.dtype())?;
            let (s, _, _) = model.obs_step(&state, &action, &model.encode(&obs)?, None)?;
            state = s.detach();
            let recon = decoder.forward(&state.feat()?)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let recon = Observation::from_normalized(&recon)?;
            for (k, frame) in [&ep.observations[t], &recon].into_iter().enumerate() {
                let tile = frame.to_image();
                image::imageops::replace(&mut img, &tile, (t as u32 * size) as i64, ((2 * row + k) as u32 * size) as i64);
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save(path).map_err(image_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochStats>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Mean ± population standard deviation of episode return across seeds at
/// each iteration present in every run.
pub fn reward_curve(runs: &[Vec<EpochStats>]) -> Vec<CurvePoint> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| r[i].episode_return).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            CurvePoint { iteration: runs[0][i].iteration, mean, std, seeds: vals.len() }
        })
        .collect()
}

/// Mean return over the last `k` collected episodes of a run.
pub fn tail_mean_return(run: &[EpochStats], k: usize) -> Option<f64> {
    let tail = &run[run.len().saturating_sub(k)..];
    (!tail.is_empty()).then(|| tail.iter().map(|s| s.episode_return).sum::<f64>() / tail.len() as f64)
}
