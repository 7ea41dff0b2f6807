//! World model plus behavior, acting on real observations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::Adam;
use crate::behavior::{Behavior, BehaviorConfig, BehaviorStep, ACTION_LIMIT};
use crate::error::Result;
use crate::world_model::{
    LossWeights, ModelState, ObjectiveFlags, Observation, TrajectoryBatch, WorldModel, WorldModelConfig,
    WorldModelStep,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub world_model: WorldModel,
    pub behavior: Behavior,
    pub wm_opt: Adam,
}

/// Result of one joint update.
pub struct UpdateStep {
    pub world: WorldModelStep,
    pub behavior: BehaviorStep,
}

impl Agent {
    pub fn new(wm: WorldModelConfig, behavior: BehaviorConfig, rng: &mut impl Rng) -> Result<Self> {
        let world_model = WorldModel::new(wm, rng)?;
        let behavior = Behavior::for_world_model(behavior, &world_model, rng)?;
        let wm_opt = world_model.optimizer();
        Ok(Self {
            world_model,
            behavior,
            wm_opt,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.world_model.config.action_dim
    }

    /// Model state before the first observation of an episode.
    pub fn initial_state(&self) -> ModelState {
        self.world_model.initial_state()
    }

    /// Replaces `s` with the encoding of `obs`, keeping `h`.
    pub fn observe(&self, state: &mut ModelState, obs: &Observation) -> Result<()> {
        state.s = self.world_model.encode_obs(obs)?;
        Ok(())
    }

    /// Mode action plus Gaussian exploration noise, kept inside `(−1, 1)`.
    pub fn act(&self, state: &ModelState, noise_std: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mode = self.behavior.policy_dist(state)?.mode();
        Ok(mode
            .into_iter()
            .map(|m| {
                let n = if noise_std > 0.0 {
                    noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (m + n).clamp(-ACTION_LIMIT, ACTION_LIMIT)
            })
            .collect())
    }

    /// Advances `h` after taking `action` in `state`.
    pub fn advance(&self, state: &mut ModelState, action: &[f64]) -> Result<()> {
        state.h = self.world_model.step_state(state, action)?;
        Ok(())
    }

    /// World-model step followed by a behavior step from the batch's states.
    pub fn update(
        &mut self,
        batch: &TrajectoryBatch,
        weights: &LossWeights,
        flags: ObjectiveFlags,
        rng: &mut (impl Rng + rand::RngCore),
    ) -> Result<UpdateStep> {
        let world = self.world_model.train_step(&mut self.wm_opt, batch, weights, flags, rng)?;
        let behavior = self
            .behavior
            .train_step(&self.world_model, &world.start_h, &world.start_s, rng)?;
        Ok(UpdateStep { world, behavior })
    }
}
