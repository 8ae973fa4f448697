//! Contrastive and likelihood-based active inference agents on pixel
//! observations: recurrent world model, behavior learning in imagination,
//! the training loop and analysis tools.

pub mod agent;
pub mod analysis;
pub mod arch;
pub mod behavior;
pub mod conv;
pub mod dist;
pub mod nn;
pub mod optim;
pub mod params;
pub mod replay;
pub mod trainer;
pub mod world_model;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Env(#[from] cai_envs::EnvError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
