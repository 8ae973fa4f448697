//! Command implementations behind the `cai` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use cai_core::agent::AgentKind;
use cai_core::analysis::{
    efficiency_report, grid_utility_heatmap, pose_utility_table, read_metrics, reconstruction_dump, reward_curve,
    sample_poses, save_png, wallclock_report, WallclockConfig,
};
use cai_core::arch::ArchConfig;
use cai_core::replay::ReplayBuffer;
use cai_core::trainer::{evaluate, Trainer};
use cai_envs::TaskSpec;

pub use config::{ConfigError, ExperimentConfig};

/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(cai_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl From<cai_core::Error> for CliError {
    fn from(e: cai_core::Error) -> Self {
        match e {
            cai_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Core(_) | CliError::Io(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const SNAPSHOT_NAME: &str = "config.toml";

/// Trains every selected seed; returns the seed run directories.
pub fn cmd_train(cfg: &ExperimentConfig, only_seed: Option<u64>, resume: bool) -> CliResult<Vec<PathBuf>> {
    let seeds: Vec<u64> = match only_seed {
        Some(s) if !cfg.seeds.contains(&s) => {
            return Err(CliError::Usage(format!("seed {s} is not listed in the configuration seeds {:?}", cfg.seeds)))
        }
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let exp = cfg.experiment_dir();
    fs::create_dir_all(&exp)?;
    fs::write(exp.join(SNAPSHOT_NAME), cfg.to_toml())?;
    let (agent, train) = cfg.resolve();
    let mut dirs = Vec::new();
    for seed in seeds {
        let dir = cfg.seed_dir(seed);
        let has_checkpoint = dir.join("checkpoint").join("checkpoint.json").exists();
        let mut trainer = if has_checkpoint {
            if !resume {
                return Err(CliError::Usage(format!(
                    "{} already holds a checkpoint; pass --resume to continue it",
                    dir.display()
                )));
            }
            let t = Trainer::resume(&dir, Some(train.clone()))?;
            if t.agent.config != agent || t.task != cfg.environment {
                return Err(CliError::Usage(format!(
                    "checkpoint in {} was trained with a different agent or environment configuration",
                    dir.display()
                )));
            }
            t
        } else {
            fs::create_dir_all(&dir)?;
            Trainer::new(cfg.environment.clone(), agent.clone(), train.clone(), seed, Some(dir.clone()))?
        };
        fs::write(dir.join(SNAPSHOT_NAME), cfg.to_toml())?;
        log::info!("seed {seed}: training into {}", dir.display());
        let stats = trainer.run()?;
        if let Some(last) = stats.last() {
            log::info!("seed {seed}: finished iteration {} with return {:.3}", last.iteration, last.episode_return);
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Deterministic-policy evaluation of a checkpoint. When `expected` is given
/// the checkpoint must have been trained with that configuration.
pub fn cmd_eval(
    run: &Path,
    episodes: usize,
    seed: u64,
    expected: Option<&ExperimentConfig>,
) -> CliResult<cai_core::trainer::EvalSummary> {
    let resolved = expected.map(|c| (c.environment.clone(), c.resolve().0));
    let (agent, meta) = Trainer::load_agent(run, resolved.as_ref().map(|(t, a)| (t, a)))?;
    let summary = evaluate(&agent, &meta.task, episodes, seed)?;
    fs::write(run.join("eval.json"), serde_json::to_vec_pretty(&summary).map_err(cai_core::Error::from)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Report {
    Heatmap,
    Poses,
    Efficiency,
    Wallclock,
    Reconstructions,
    Curves,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub report: Report,
    pub run: Option<PathBuf>,
    pub config: Option<ExperimentConfig>,
    pub out: Option<PathBuf>,
    pub updates: usize,
    pub poses: usize,
    pub episodes: usize,
    pub frames: usize,
}

fn need_run(opts: &AnalyzeOptions) -> CliResult<&Path> {
    opts.run
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("the {:?} report needs --run <checkpoint directory>", opts.report)))
}

/// Writes the requested report and returns the files produced.
pub fn cmd_analyze(opts: &AnalyzeOptions) -> CliResult<Vec<PathBuf>> {
    let out = match (&opts.out, &opts.run) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.join("analysis"),
        (None, None) => PathBuf::from("analysis"),
    };
    fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    match opts.report {
        Report::Heatmap => {
            let (agent, meta) = Trainer::load_agent(need_run(opts)?, None)?;
            if !meta.task.is_grid() {
                return Err(CliError::Usage("the heatmap report is only defined for grid checkpoints".into()));
            }
            let report = grid_utility_heatmap(&agent, &meta.task)?;
            report.write(&out).map_err(CliError::from)?;
            files.extend(["heatmap.png", "heatmap.csv", "heatmap.json"].map(|f| out.join(f)));
        }
        Report::Poses => {
            let (agent, meta) = Trainer::load_agent(need_run(opts)?, None)?;
            let TaskSpec::Reacher { difficulty, .. } = meta.task else {
                return Err(CliError::Usage("the poses report is only defined for reacher checkpoints".into()));
            };
            let table = pose_utility_table(&agent, &sample_poses(opts.poses, None, 0), difficulty)?;
            let path = out.join("poses.csv");
            fs::write(&path, table.to_csv())?;
            files.push(path);
        }
        Report::Efficiency => {
            let arch = match (&opts.run, &opts.config) {
                (Some(run), _) => Trainer::read_meta(run)?.agent.arch,
                (None, Some(cfg)) => cfg.agent.arch.clone(),
                (None, None) => ArchConfig::default(),
            };
            let report = efficiency_report(&arch);
            let text = report.to_text(&arch);
            print!("{text}");
            let path = out.join("efficiency.txt");
            fs::write(&path, text)?;
            files.push(path);
        }
        Report::Wallclock => {
            let mut wc = WallclockConfig { updates: opts.updates, ..Default::default() };
            if let Some(cfg) = &opts.config {
                wc.arch = cfg.agent.arch.clone();
                wc.task = cfg.environment.clone();
            }
            let report = wallclock_report(&wc, &AgentKind::ALL)?;
            let text = report.to_text();
            print!("{text}");
            let path = out.join("wallclock.txt");
            fs::write(&path, text)?;
            files.push(path);
        }
        Report::Reconstructions => {
            let run = need_run(opts)?;
            let (agent, meta) = Trainer::load_agent(run, None)?;
            let buffer = ReplayBuffer::load_dir(run.join("episodes"), agent.action_space().encoded_dim(), meta.episodes)?;
            let eps = buffer.episodes();
            let chosen = &eps[eps.len().saturating_sub(opts.episodes)..];
            let img = reconstruction_dump(&agent, chosen, opts.frames)?;
            let path = out.join("reconstructions.png");
            save_png(&img, &path)?;
            files.push(path);
        }
        Report::Curves => {
            let dir = need_run(opts)?;
            let mut runs = Vec::new();
            let single = dir.join("metrics.jsonl");
            if single.exists() {
                runs.push(read_metrics(&single)?);
            } else {
                let mut seeds: Vec<PathBuf> = fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path().join("metrics.jsonl")))
                    .filter(|p| p.exists())
                    .collect();
                seeds.sort();
                for p in seeds {
                    runs.push(read_metrics(&p)?);
                }
            }
            if runs.is_empty() {
                return Err(CliError::Usage(format!("no metrics.jsonl under {}", dir.display())));
            }
            let mut csv = String::from("iteration,mean_return,std_return,seeds\n");
            for p in reward_curve(&runs) {
                csv.push_str(&format!("{},{},{},{}\n", p.iteration, p.mean, p.std, p.seeds));
            }
            let path = out.join("reward_curve.csv");
            fs::write(&path, csv)?;
            files.push(path);
        }
    }
    Ok(files)
}
