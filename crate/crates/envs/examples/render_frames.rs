//! Writes a few representative frames of both tasks as PNG files.
//!
//! cargo run -p cai-envs --example render_frames -- <out_dir>

use cai_envs::{grid, reacher, Difficulty, DistractionConfig, Environment, PreferencePrior};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "frames".into());
    std::fs::create_dir_all(&out)?;
    grid::goal_spec(6, PreferencePrior::Laplace)?.observation.save_png(format!("{out}/grid6_goal.png"))?;
    grid::goal_spec(8, PreferencePrior::Laplace)?.observation.save_png(format!("{out}/grid8_goal.png"))?;
    let mut g = grid::GridWorld::new(6, 0)?;
    g.reset().save_png(format!("{out}/grid6_start.png"))?;
    for d in [Difficulty::Easy, Difficulty::Hard] {
        reacher::goal_spec(d, PreferencePrior::Laplace)
            .observation
            .save_png(format!("{out}/reacher_{d:?}_goal.png").to_lowercase())?;
    }
    for seed in 0..4 {
        let mut env = reacher::Reacher::new(Difficulty::Easy, DistractionConfig::easy(), seed)?;
        env.reset().save_png(format!("{out}/distracting_{seed}.png"))?;
    }
    Ok(())
}
