//! Episode storage, the on-disk episode layout and subsequence sampling.
//!
//! An episode with `T` transitions is stored as `T + 1` aligned steps:
//! step `t` holds observation `o_t`, the action `a_{t-1}` that led to it
//! (zeros at `t = 0`) and the reward received on arrival (0 at `t = 0`).
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CAIEP001"
//! version    u32      1
//! steps      u32      T + 1
//! height     u32      64
//! width      u32      64
//! channels   u32      3
//! action_dim u32
//! pixels     (T + 1)·64·64·3 bytes, HWC per frame
//! actions    T·action_dim f32
//! rewards    T f32
//! meta_len   u32, then meta_len bytes of JSON metadata
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use cai_envs::{EpisodeMeta, Observation, OBS_CHANNELS, OBS_HEIGHT, OBS_LEN, OBS_WIDTH};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CAIEP001";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// `T + 1` observations, starting with the reset frame.
    pub observations: Vec<Observation>,
    /// `T` encoded actions.
    pub actions: Vec<Vec<f32>>,
    /// `T` rewards.
    pub rewards: Vec<f32>,
    pub meta: EpisodeMeta,
}

impl EpisodeRecord {
    pub fn new(first: Observation, meta: EpisodeMeta) -> Self {
        Self { observations: vec![first], actions: vec![], rewards: vec![], meta }
    }

    pub fn push(&mut self, action: Vec<f32>, reward: f32, next: Observation) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.observations.push(next);
    }

    /// Number of transitions.
    pub fn transitions(&self) -> usize {
        self.actions.len()
    }

    /// Number of aligned steps, `T + 1`.
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    pub fn action_dim(&self) -> Option<usize> {
        self.actions.first().map(Vec::len)
    }

    pub fn validate(&self, action_dim: usize) -> Result<()> {
        let t = self.actions.len();
        if self.observations.len() != t + 1 || self.rewards.len() != t {
            return Err(Error::Contract(format!(
                "episode with {} observations, {} actions, {} rewards",
                self.observations.len(),
                t,
                self.rewards.len()
            )));
        }
        if self.actions.iter().any(|a| a.len() != action_dim) {
            return Err(Error::Contract(format!("episode actions are not all of dimension {action_dim}")));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write, action_dim: usize) -> Result<()> {
        self.validate(action_dim)?;
        w.write_all(MAGIC)?;
        for v in [VERSION, self.steps() as u32, OBS_HEIGHT as u32, OBS_WIDTH as u32, OBS_CHANNELS as u32, action_dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for o in &self.observations {
            w.write_all(o.pixels())?;
        }
        for a in &self.actions {
            for x in a {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for r in &self.rewards {
            w.write_all(&r.to_le_bytes())?;
        }
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not an episode file (bad magic)".into()));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            *v = read_u32(r)?;
        }
        let [version, steps, h, w, c, action_dim] = u32s;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported episode version {version}")));
        }
        if (h as usize, w as usize, c as usize) != (OBS_HEIGHT, OBS_WIDTH, OBS_CHANNELS) || steps == 0 {
            return Err(Error::Checkpoint(format!("unexpected episode shape {steps}×{h}×{w}×{c}")));
        }
        let steps = steps as usize;
        let mut observations = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut px = vec![0u8; OBS_LEN];
            r.read_exact(&mut px)?;
            observations.push(Observation::new(px)?);
        }
        let t = steps - 1;
        let mut actions = Vec::with_capacity(t);
        for _ in 0..t {
            actions.push((0..action_dim).map(|_| read_f32(r)).collect::<Result<Vec<_>>>()?);
        }
        let rewards = (0..t).map(|_| read_f32(r)).collect::<Result<Vec<_>>>()?;
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        Ok(Self { observations, actions, rewards, meta: serde_json::from_slice(&meta)? })
    }

    pub fn save(&self, path: impl AsRef<Path>, action_dim: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f, action_dim)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Sampled subsequences, rows ordered `t·B + b`.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Normalized observations `(L·B, 64, 64, 3)`.
    pub obs: Tensor,
    /// Encoded previous actions `(L·B, action_dim)`.
    pub prev_actions: Tensor,
    /// Rewards received on arrival `(L·B,)`.
    pub rewards: Tensor,
    pub b: usize,
    pub l: usize,
    /// `(episode, start step)` of each sequence.
    pub sources: Vec<(usize, usize)>,
}

/// Append-only episode store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    action_dim: usize,
    episodes: Vec<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(action_dim: usize) -> Self {
        Self { action_dim, episodes: Vec::new() }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn push(&mut self, episode: EpisodeRecord) -> Result<()> {
        episode.validate(self.action_dim)?;
        self.episodes.push(episode);
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(EpisodeRecord::steps).sum()
    }

    /// Number of valid start positions per episode for length `l`.
    pub fn valid_starts(&self, l: usize) -> Vec<usize> {
        self.episodes.iter().map(|e| (e.steps() + 1).saturating_sub(l)).collect()
    }

    /// Draws `b` `(episode, start)` pairs uniformly over all valid pairs.
    pub fn sample_starts(&self, b: usize, l: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        if l == 0 || b == 0 {
            return Err(Error::Contract(format!("batch shape B={b}, L={l} must be positive")));
        }
        let mut prefix = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for n in self.valid_starts(l) {
            total += n;
            prefix.push(total);
        }
        if total == 0 {
            let longest = self.episodes.iter().map(EpisodeRecord::steps).max().unwrap_or(0);
            return Err(Error::Contract(format!(
                "no stored episode has {l} steps (buffer holds {} episodes, longest {longest} steps)",
                self.episodes.len()
            )));
        }
        Ok((0..b)
            .map(|_| {
                let u = rng.random_range(0..total);
                let ep = prefix.partition_point(|&p| p <= u);
                let before = if ep == 0 { 0 } else { prefix[ep - 1] };
                (ep, u - before)
            })
            .collect())
    }

    pub fn sample_batch(&self, b: usize, l: usize, dtype: DType, rng: &mut impl Rng) -> Result<Batch> {
        let sources = self.sample_starts(b, l, rng)?;
        self.gather(&sources, l, dtype)
    }

    /// Builds a batch from explicit `(episode, start)` pairs.
    pub fn gather(&self, sources: &[(usize, usize)], l: usize, dtype: DType) -> Result<Batch> {
        let b = sources.len();
        let a = self.action_dim;
        let mut obs = vec![0f32; l * b * OBS_LEN];
        let mut acts = vec![0f32; l * b * a];
        let mut rews = vec![0f32; l * b];
        for (i, &(ep, start)) in sources.iter().enumerate() {
            let e = self
                .episodes
                .get(ep)
                .ok_or_else(|| Error::Contract(format!("episode {ep} not in buffer")))?;
            if start + l > e.steps() {
                return Err(Error::Contract(format!("subsequence {start}+{l} exceeds episode of {} steps", e.steps())));
            }
            for t in 0..l {
                let row = t * b + i;
                let step = start + t;
                e.observations[step].write_normalized(&mut obs[row * OBS_LEN..(row + 1) * OBS_LEN]);
                if step > 0 {
                    acts[row * a..(row + 1) * a].copy_from_slice(&e.actions[step - 1]);
                    rews[row] = e.rewards[step - 1];
                }
            }
        }
        let dev = Device::Cpu;
        Ok(Batch {
            obs: Tensor::from_vec(obs, (l * b, OBS_HEIGHT, OBS_WIDTH, OBS_CHANNELS), &dev)?.to_dtype(dtype)?,
            prev_actions: Tensor::from_vec(acts, (l * b, a), &dev)?.to_dtype(dtype)?,
            rewards: Tensor::from_vec(rews, l * b, &dev)?.to_dtype(dtype)?,
            b,
            l,
            sources: sources.to_vec(),
        })
    }

    fn episode_path(dir: &Path, i: usize) -> PathBuf {
        dir.join(format!("episode_{i:06}.bin"))
    }

    /// Writes episodes not yet on disk; existing files are kept as they are.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, e) in self.episodes.iter().enumerate() {
            let path = Self::episode_path(dir, i);
            if !path.exists() {
                e.save(&path, self.action_dim)?;
            }
        }
        Ok(())
    }

    /// Loads the first `count` episodes from a directory.
    pub fn load_dir(dir: impl AsRef<Path>, action_dim: usize, count: usize) -> Result<Self> {
        let mut buf = Self::new(action_dim);
        for i in 0..count {
            let path = Self::episode_path(dir.as_ref(), i);
            let e = EpisodeRecord::load(&path)
                .map_err(|err| Error::Checkpoint(format!("reading {}: {err}", path.display())))?;
            buf.push(e)?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Episode whose frames encode (episode, step) in the first two bytes.
    fn episode(id: u8, transitions: usize) -> EpisodeRecord {
        let frame = |t: usize| {
            let mut o = Observation::filled([0, 0, 0]);
            o.set(0, 0, [id, t as u8, 0]);
            o
        };
        let mut e = EpisodeRecord::new(frame(0), EpisodeMeta { seed: id as u64, ..Default::default() });
        for t in 0..transitions {
            e.push(vec![t as f32, id as f32], (t + 1) as f32 * 0.1, frame(t + 1));
        }
        e
    }

    #[test]
    fn binary_round_trip() {
        let e = episode(7, 5);
        let mut bytes = Vec::new();
        e.write_to(&mut bytes, 2).unwrap();
        assert_eq!(&bytes[..8], b"CAIEP001");
        let back = EpisodeRecord::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, e);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EpisodeRecord::read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn exact_length_episode_has_one_start() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(episode(0, 2)).unwrap();
        assert_eq!(buf.valid_starts(3), vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = buf.sample_starts(4, 3, &mut rng).unwrap();
        assert!(s.iter().all(|&p| p == (0, 0)));
        assert!(buf.sample_starts(1, 4, &mut rng).is_err());
    }

    #[test]
    fn batch_alignment() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(episode(3, 4)).unwrap();
        let batch = buf.gather(&[(0, 0), (0, 2)], 3, DType::F32).unwrap();
        let acts = batch.prev_actions.to_vec2::<f32>().unwrap();
        let rews = batch.rewards.to_vec1::<f32>().unwrap();
        // row t·B + b
        assert_eq!(acts[0], vec![0.0, 0.0]);
        assert_eq!(rews[0], 0.0);
        assert_eq!(acts[1], vec![1.0, 3.0]);
        assert!((rews[1] - 0.2).abs() < 1e-6);
        assert_eq!(acts[2], vec![0.0, 3.0]);
        let px = batch.obs.flatten_from(1).unwrap().to_vec2::<f32>().unwrap();
        let step_of = |row: usize| ((px[row][1] + 0.5) * 255.0).round() as usize;
        assert_eq!((0..6).map(step_of).collect::<Vec<_>>(), vec![0, 2, 1, 3, 2, 4]);
    }

    #[test]
    fn sampling_is_uniform_over_pairs() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(episode(0, 1)).unwrap(); // 1 start for L=2
        buf.push(episode(1, 4)).unwrap(); // 4 starts
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 2];
        for (ep, _) in buf.sample_starts(5000, 2, &mut rng).unwrap() {
            counts[ep] += 1;
        }
        let frac = counts[0] as f64 / 5000.0;
        assert!((frac - 0.2).abs() < 0.03, "{frac}");
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::new(2);
        buf.push(episode(1, 3)).unwrap();
        buf.push(episode(2, 1)).unwrap();
        buf.save_dir(dir.path()).unwrap();
        let back = ReplayBuffer::load_dir(dir.path(), 2, 2).unwrap();
        assert_eq!(back.episodes(), buf.episodes());
        assert!(ReplayBuffer::load_dir(dir.path(), 2, 3).is_err());
    }
}
