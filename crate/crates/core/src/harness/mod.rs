//! Replay, configuration, the training loop and evaluation probes.

pub mod autoencoder;
pub mod collect;
pub mod config;
pub mod mi;
pub mod probes;
pub mod replay;
pub mod train;

pub use collect::{episode_returns, run_episode, seed_dataset, Actor};
pub use config::{Ablation, ModelDims, TrainConfig, Variant};
pub use replay::{ChunkIndex, Episode, ReplayBuffer};
pub use train::{evaluate_agent, mean_std, median, random_returns, IterationReport, RunSummary, Trainer};
