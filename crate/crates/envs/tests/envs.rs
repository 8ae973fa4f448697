use cai_envs::grid::{goal_reward, max_episode_steps};
use cai_envs::reacher::wrap_angle;
use cai_envs::{Action, Difficulty, DistractionConfig, Environment, GridAction, GridState, Heading, TaskSpec, OBS_LEN};
use proptest::prelude::*;

fn rollout(env: &mut dyn Environment, actions: &[Action]) -> Vec<(Vec<u8>, f32, bool)> {
    env.reset();
    let mut out = Vec::new();
    for a in actions {
        let r = env.step(a).unwrap();
        let done = r.done;
        out.push((r.observation.into_pixels(), r.reward, done));
        if done {
            break;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_agent_stays_inside_and_rewards_are_bounded(
        size in prop::sample::select(vec![6usize, 8]),
        actions in prop::collection::vec(0usize..3, 1..300),
    ) {
        let max = max_episode_steps(size);
        let mut s = GridState::reset(size).unwrap();
        for (i, a) in actions.iter().enumerate() {
            let (r, done) = s.step(GridAction::from_index(*a).unwrap(), max).unwrap();
            prop_assert!(s.is_interior(s.agent_pos));
            prop_assert!((0.0..=1.0).contains(&r));
            if r > 0.0 {
                prop_assert_eq!(s.agent_pos, s.goal_pos);
                prop_assert_eq!(r, goal_reward(i, max));
                prop_assert!(done);
            }
            prop_assert_eq!(done, s.agent_pos == s.goal_pos || i + 1 >= max);
            if done {
                prop_assert!(s.step(GridAction::TurnLeft, max).is_err());
                break;
            }
        }
    }

    #[test]
    fn grid_episodes_replay_exactly(seed in any::<u64>(), actions in prop::collection::vec(0usize..3, 1..60)) {
        let task = TaskSpec::Grid { size: 6 };
        let acts: Vec<Action> = actions.into_iter().map(Action::Discrete).collect();
        let a = rollout(task.build(seed).unwrap().as_mut(), &acts);
        let b = rollout(task.build(seed.wrapping_add(1)).unwrap().as_mut(), &acts);
        // The room has no randomness, so the seed cannot matter.
        prop_assert_eq!(a, b);
    }

    #[test]
    fn four_turns_are_the_identity(start in 0usize..4, left in any::<bool>()) {
        let h = [Heading::East, Heading::South, Heading::West, Heading::North][start];
        let mut g = h;
        for _ in 0..4 {
            g = if left { g.turn_left() } else { g.turn_right() };
        }
        prop_assert_eq!(g, h);
        prop_assert_eq!(h.turn_left().turn_right(), h);
    }

    #[test]
    fn wrapped_angles_lie_in_half_open_interval(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let k = ((a - w) / (2.0 * std::f64::consts::PI)).round();
        prop_assert!((a - w - k * 2.0 * std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn reacher_steps_are_well_formed(
        seed in any::<u64>(),
        torques in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 1..12),
        distracted in any::<bool>(),
    ) {
        let distraction = if distracted { DistractionConfig::easy() } else { DistractionConfig::default() };
        let task = TaskSpec::Reacher { difficulty: Difficulty::Easy, distraction, max_episode_steps: 8 };
        let acts: Vec<Action> = torques.iter().map(|&(a, b)| Action::Continuous(vec![a, b])).collect();
        let a = rollout(task.build(seed).unwrap().as_mut(), &acts);
        let b = rollout(task.build(seed).unwrap().as_mut(), &acts);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.len() <= 8);
        for (i, (pixels, r, done)) in a.iter().enumerate() {
            prop_assert_eq!(pixels.len(), OBS_LEN);
            prop_assert!(*r == 0.0 || *r == 1.0);
            prop_assert_eq!(*done, i + 1 == 8);
        }
    }
}

#[test]
fn grid_rejects_wrong_action_kind() {
    let mut env = TaskSpec::Grid { size: 6 }.build(0).unwrap();
    env.reset();
    assert!(env.step(&Action::Continuous(vec![0.0, 0.0])).is_err());
    assert!(env.step(&Action::Discrete(3)).is_err());
}

#[test]
fn task_spec_round_trips_through_json() {
    for task in [
        TaskSpec::Grid { size: 8 },
        TaskSpec::Reacher { difficulty: Difficulty::Easy, distraction: DistractionConfig::easy(), max_episode_steps: 50 },
    ] {
        let text = serde_json::to_string(&task).unwrap();
        assert_eq!(serde_json::from_str::<TaskSpec>(&text).unwrap(), task);
    }
}
