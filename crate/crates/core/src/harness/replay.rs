//! Episode storage and contiguous chunk sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::envs::PhysicalState;
use crate::error::{contract, Result};
use crate::world_model::TrajectoryBatch;

/// One episode of `N` decisions.
///
/// `obs`, `rewards` and `states` hold `N + 1` entries. `actions[t]` is the
/// action taken after `obs[t]`; the final entry is a zero placeholder so every
/// observation has an action row. `rewards[t]` is the reward associated with
/// reaching `obs[t]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub states: Vec<PhysicalState>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Sum of rewards earned by the agent's decisions (excludes `rewards[0]`).
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().skip(1).sum()
    }

    fn check(&self) -> Result<()> {
        let n = self.obs.len();
        if n == 0 || self.actions.len() != n || self.rewards.len() != n || self.states.len() != n {
            return contract(format!(
                "episode arrays disagree: {} obs, {} actions, {} rewards, {} states",
                n,
                self.actions.len(),
                self.rewards.len(),
                self.states.len()
            ));
        }
        Ok(())
    }
}

/// Position of a sampled chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkIndex {
    pub episode: usize,
    pub start: usize,
}

/// Unbounded store of complete episodes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReplayBuffer {
    episodes: Vec<Episode>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, episode: Episode) -> Result<()> {
        episode.check()?;
        self.episodes.push(episode);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    /// Draws `batch` chunk positions of length `length`, each inside one episode.
    pub fn sample_indices(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<Vec<ChunkIndex>> {
        if length == 0 || batch == 0 {
            return contract("chunk length and batch size must be positive");
        }
        let eligible: Vec<usize> = (0..self.episodes.len())
            .filter(|&i| self.episodes[i].len() >= length)
            .collect();
        if eligible.is_empty() {
            return contract(format!("no stored episode holds a chunk of length {length}"));
        }
        Ok((0..batch)
            .map(|_| {
                let episode = eligible[rng.gen_range(0..eligible.len())];
                let start = rng.gen_range(0..=self.episodes[episode].len() - length);
                ChunkIndex { episode, start }
            })
            .collect())
    }

    /// Gathers chunks into a time-major batch.
    pub fn gather(&self, chunks: &[ChunkIndex], length: usize) -> Result<TrajectoryBatch> {
        let b = chunks.len();
        let first = &self.episodes[chunks[0].episode];
        let (p, a) = (first.obs[0].len(), first.actions[0].len());
        let mut obs = Vec::with_capacity(b * length * p);
        let mut actions = Vec::with_capacity(b * length * a);
        let mut rewards = Vec::with_capacity(b * length);
        for t in 0..length {
            for c in chunks {
                let ep = &self.episodes[c.episode];
                obs.extend_from_slice(&ep.obs[c.start + t]);
                actions.extend_from_slice(&ep.actions[c.start + t]);
                rewards.push(ep.rewards[c.start + t]);
            }
        }
        Ok(TrajectoryBatch {
            batch: b,
            length,
            obs: Tensor::matrix(b * length, p, obs)?,
            actions: Tensor::matrix(b * length, a, actions)?,
            rewards: Tensor::matrix(b * length, 1, rewards)?,
        })
    }

    pub fn sample(&self, batch: usize, length: usize, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        let idx = self.sample_indices(batch, length, rng)?;
        self.gather(&idx, length)
    }
}
