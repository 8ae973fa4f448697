use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cai_cli::{ExperimentConfig, EXIT_CONFIG, EXIT_RUNTIME};

const SMALL: &str = r#"
[agent.arch]
stoch = 6
deter = 16
hidden = 16
behavior_hidden = 16
embed_dim = 8
critic_hidden = 16
encoder_channels = [4, 4, 4, 4]
decoder_channels = [4, 4, 4, 3]

[agent.returns]
horizon = 2

[training]
seed_episodes = 1
updates_per_iteration = 1
batch_size = 2
seq_len = 3
iterations = 1
checkpoint_every = 1
"#;

fn cai(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cai"))
        .args(args)
        .env("CAI_RUNS_DIR", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, head: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, format!("{head}\n{SMALL}")).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn defaults_command_prints_a_parsable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cai(tmp.path(), &["defaults", "--agent-kind", "likelihood-aif"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = ExperimentConfig::parse(&stdout(&o), &[]).unwrap();
    assert_eq!(cfg.agent.agent_kind.name(), "likelihood-aif");
    let (agent, train) = cfg.resolve();
    assert_eq!((train.batch_size, train.seq_len, agent.returns.horizon), (50, 7, 6));
    assert_eq!((train.seed_episodes, train.updates_per_iteration), (50, 100));
}

#[test]
fn config_errors_name_the_field_and_use_their_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[agent]\npreference = \"laplace\"");
    let o = cai(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("agent_kind"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "seeds = [0]\ncolour = 3\n[agent]\nagent_kind = \"dreamer\"");
    let o = cai(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let o = cai(tmp.path(), &["train", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn train_two_seeds_then_eval_and_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "seeds = [1, 2]\n[agent]\nagent_kind = \"dreamer\"");
    let cfg_s = cfg_path.to_str().unwrap();
    let o = cai(tmp.path(), &["train", "--config", cfg_s, "--set", "output.name=exp"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let exp = tmp.path().join("exp");
    for seed in ["seed1", "seed2"] {
        let d = exp.join(seed);
        assert!(d.join("checkpoint/checkpoint.json").exists());
        assert_eq!(std::fs::read_to_string(d.join("metrics.jsonl")).unwrap().lines().count(), 1);
        let snap = std::fs::read_to_string(d.join("config.toml")).unwrap();
        let reparsed = ExperimentConfig::parse(&snap, &[]).unwrap();
        let original = ExperimentConfig::load(&cfg_path, &["output.name=exp".into()]).unwrap();
        assert_eq!(reparsed, original);
    }

    // Re-running needs an explicit resume; resuming extends the budget.
    let o = cai(tmp.path(), &["train", "--config", cfg_s, "--set", "output.name=exp"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG), "{}", stderr(&o));
    let o = cai(
        tmp.path(),
        &["train", "--config", cfg_s, "--set", "output.name=exp", "--set", "training.iterations=2", "--seed", "1", "--resume"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(exp.join("seed1/metrics.jsonl")).unwrap().lines().count(), 2);

    let run = exp.join("seed2");
    let run_s = run.to_str().unwrap();
    let o = cai(tmp.path(), &["eval", "--run", run_s, "-n", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("no episodes"));
    let a = cai(tmp.path(), &["eval", "--run", run_s, "-n", "2", "--seed", "5"]);
    let b = cai(tmp.path(), &["eval", "--run", run_s, "-n", "2", "--seed", "5"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));

    let o = cai(tmp.path(), &["eval", "--run", run_s, "-n", "1", "--config", cfg_s, "--set", "agent.arch.stoch=7"]);
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME), "{}", stderr(&o));
    let o = cai(tmp.path(), &["eval", "--run", run_s, "-n", "1", "--config", cfg_s, "--set", "output.name=exp"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = cai(tmp.path(), &["analyze", "heatmap", "--run", run_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("analysis/heatmap.png").exists());
    let o = cai(tmp.path(), &["analyze", "reconstructions", "--run", run_s, "--frames", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("analysis/reconstructions.png").exists());
    let o = cai(tmp.path(), &["analyze", "curves", "--run", exp.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = std::fs::read_to_string(exp.join("analysis/reward_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2, "{curve}");
    let o = cai(tmp.path(), &["analyze", "poses", "--run", run_s]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn unsupported_reports_fail_informatively() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[environment]\ntask = \"reacher\"\nmax_episode_steps = 5\n[agent]\nagent_kind = \"contrastive-aif\"",
    );
    let o = cai(tmp.path(), &["train", "--config", cfg.to_str().unwrap(), "--set", "output.name=r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("r/seed0");
    let run_s = run.to_str().unwrap();
    let o = cai(tmp.path(), &["analyze", "heatmap", "--run", run_s]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("grid"), "{}", stderr(&o));
    let o = cai(tmp.path(), &["analyze", "reconstructions", "--run", run_s]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&o).contains("decoder"), "{}", stderr(&o));
    let o = cai(tmp.path(), &["analyze", "poses", "--run", run_s, "--poses", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("analysis/poses.csv")).unwrap().lines().count(), 7);
}

#[test]
fn efficiency_runs_without_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eff");
    let o = cai(tmp.path(), &["analyze", "efficiency", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ratio"));
    assert!(out.join("efficiency.txt").exists());
    let o = cai(tmp.path(), &["analyze", "heatmap"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}
