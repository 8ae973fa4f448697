use cai_core::agent::{AgentConfig, AgentKind};
use cai_core::arch::ArchConfig;
use cai_core::trainer::{EpochStats, TrainConfig, Trainer};
use cai_envs::TaskSpec;

fn small_agent(kind: AgentKind) -> AgentConfig {
    let mut cfg = AgentConfig::new(kind);
    cfg.arch = ArchConfig::small();
    cfg.returns.horizon = 3;
    cfg
}

fn small_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        seed_episodes: 2,
        updates_per_iteration: 2,
        batch_size: 3,
        seq_len: 4,
        iterations,
        checkpoint_every: 1,
    }
}

fn strip(stats: &[EpochStats]) -> Vec<EpochStats> {
    stats.iter().map(EpochStats::without_timing).collect()
}

#[test]
fn same_seed_reproduces_metrics_and_weights() {
    let task = TaskSpec::Grid { size: 6 };
    let mut a = Trainer::new(task.clone(), small_agent(AgentKind::ContrastiveAif), small_train(2), 11, None).unwrap();
    let mut b = Trainer::new(task, small_agent(AgentKind::ContrastiveAif), small_train(2), 11, None).unwrap();
    let sa = a.run().unwrap();
    let sb = b.run().unwrap();
    assert_eq!(strip(&sa), strip(&sb));
    assert_eq!(a.agent.checksum().unwrap(), b.agent.checksum().unwrap());
    assert_eq!(a.buffer.len(), 4);
    assert!(sa.iter().all(|s| s.nce_bound.is_some() && s.recon_nll.is_none()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let task = TaskSpec::Grid { size: 6 };
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(task.clone(), small_agent(AgentKind::Dreamer), small_train(2), 5, None).unwrap();
    let full_stats = full.run().unwrap();

    let run = dir.path().join("run");
    let mut first = Trainer::new(task, small_agent(AgentKind::Dreamer), small_train(1), 5, Some(run.clone())).unwrap();
    let mut stats = first.run().unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&run, Some(small_train(2))).unwrap();
    assert_eq!(resumed.iteration, 1);
    stats.extend(resumed.run().unwrap());

    assert_eq!(strip(&stats), strip(&full_stats));
    assert_eq!(resumed.agent.checksum().unwrap(), full.agent.checksum().unwrap());
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

#[test]
fn resume_rejects_tampered_configuration() {
    let task = TaskSpec::Grid { size: 6 };
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut t = Trainer::new(task, small_agent(AgentKind::LikelihoodAif), small_train(0), 1, Some(run.clone())).unwrap();
    t.run().unwrap();
    let path = run.join("checkpoint/checkpoint.json");
    let mut meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    meta["agent"]["arch"]["stoch"] = serde_json::json!(7);
    std::fs::write(&path, serde_json::to_vec(&meta).unwrap()).unwrap();
    assert!(Trainer::resume(&run, None).is_err());
}
