use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cai_cli::config::documented_defaults;
use cai_cli::{cmd_analyze, cmd_eval, cmd_train, AnalyzeOptions, CliError, CliResult, ExperimentConfig, Report};
use cai_core::agent::AgentKind;

#[derive(Parser)]
#[command(name = "cai", version, about = "Train, evaluate and analyse contrastive active inference agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per configured seed.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config key, e.g. --set training.iterations=20
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Train only this seed from the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        /// Seed run directory holding `checkpoint/`.
        #[arg(short, long)]
        run: PathBuf,
        #[arg(short = 'n', long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reject the checkpoint unless it matches this configuration.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a diagnostic report.
    Analyze {
        #[arg(value_enum)]
        report: Report,
        #[arg(short, long)]
        run: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to `<run>/analysis`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Timed updates per agent kind for the wallclock report.
        #[arg(long, default_value_t = 100)]
        updates: usize,
        /// Random poses (besides the goal pose) for the poses report.
        #[arg(long, default_value_t = 20)]
        poses: usize,
        /// Episodes shown in the reconstructions report.
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        /// Frames per episode in the reconstructions report.
        #[arg(long, default_value_t = 16)]
        frames: usize,
    },
    /// Print a documented configuration with every default.
    Defaults {
        #[arg(long, default_value = "contrastive-aif")]
        agent_kind: AgentKind,
    },
}

fn load(path: Option<&PathBuf>, overrides: &[String]) -> CliResult<Option<ExperimentConfig>> {
    match path {
        Some(p) => Ok(Some(ExperimentConfig::load(p, overrides)?)),
        None if !overrides.is_empty() => Err(CliError::Usage("--set needs --config".into())),
        None => Ok(None),
    }
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env).format_timestamp_secs().try_init();
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, overrides, seed, resume } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            init_logging(&cfg.output.log_level);
            for dir in cmd_train(&cfg, seed, resume)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval { run, episodes, seed, config, overrides } => {
            init_logging("info");
            let cfg = load(config.as_ref(), &overrides)?;
            let s = cmd_eval(&run, episodes, seed, cfg.as_ref())?;
            match (s.mean_return, s.std_return) {
                (Some(m), Some(sd)) => println!("return {m:.4} ± {sd:.4} over {} episodes", s.episodes),
                _ => println!("no episodes evaluated"),
            }
        }
        Command::Analyze { report, run, config, overrides, out, updates, poses, episodes, frames } => {
            init_logging("info");
            let config = load(config.as_ref(), &overrides)?;
            let opts = AnalyzeOptions { report, run, config, out, updates, poses, episodes, frames };
            for f in cmd_analyze(&opts)? {
                println!("{}", f.display());
            }
        }
        Command::Defaults { agent_kind } => print!("{}", documented_defaults(agent_kind)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
