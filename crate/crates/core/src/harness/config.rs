//! Run configuration and ablation switches.

use serde::{Deserialize, Serialize};

use crate::behavior::BehaviorConfig;
use crate::envs::{EnvConfig, Task};
use crate::error::{Error, Result};
use crate::world_model::{LossWeights, ObjectiveFlags, WorldModelConfig};

/// Ablation switches. Exactly one of `full_tpc`, `spc_only` and
/// `unstable_tpc` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub full_tpc: bool,
    /// Drops the temporal term (`λ1 = 0`).
    pub spc_only: bool,
    /// Drops the static term (`λ3 = 0`).
    pub unstable_tpc: bool,
    pub no_smoothing: bool,
    pub separate_reward: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            full_tpc: true,
            spc_only: false,
            unstable_tpc: false,
            no_smoothing: false,
            separate_reward: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullTpc,
    SpcOnly,
    UnstableTpc,
    NoSmoothing,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::FullTpc => "full_tpc",
            Self::SpcOnly => "spc_only",
            Self::UnstableTpc => "unstable_tpc",
            Self::NoSmoothing => "no_smoothing",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation {
            full_tpc: false,
            ..Ablation::default()
        };
        match self {
            Self::FullTpc => a.full_tpc = true,
            Self::SpcOnly => a.spc_only = true,
            Self::UnstableTpc => a.unstable_tpc = true,
            Self::NoSmoothing => {
                a.full_tpc = true;
                a.no_smoothing = true;
            }
        }
        a
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_tpc" => Ok(Self::FullTpc),
            "spc_only" => Ok(Self::SpcOnly),
            "unstable_tpc" => Ok(Self::UnstableTpc),
            "no_smoothing" => Ok(Self::NoSmoothing),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        let named = [self.full_tpc, self.spc_only, self.unstable_tpc];
        if named.iter().filter(|&&x| x).count() != 1 {
            return Err(Error::Config(
                "exactly one of ablation.full_tpc, ablation.spc_only, ablation.unstable_tpc must be true".into(),
            ));
        }
        Ok(())
    }

    /// Loss weights after applying the variant.
    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        let mut w = base.clone();
        if self.spc_only {
            w.lambda1 = 0.0;
        }
        if self.unstable_tpc {
            w.lambda3 = 0.0;
        }
        w
    }

    pub fn flags(&self) -> ObjectiveFlags {
        ObjectiveFlags {
            smoothing: !self.no_smoothing,
            separate_reward: self.separate_reward,
        }
    }
}

/// Sizes of the world model; image size and action dimension come from the
/// environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub latent_dim: usize,
    pub recurrent_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let d = WorldModelConfig::desk(1);
        Self {
            latent_dim: d.latent_dim,
            recurrent_dim: d.recurrent_dim,
            hidden_dim: d.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Training environment; its episode length is the collection interval.
    pub env: EnvConfig,
    /// Physics steps per evaluation episode.
    #[serde(default = "default_eval_length")]
    pub eval_episode_length: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
    pub batch_size: usize,
    pub chunk_length: usize,
    /// Gradient updates per collected episode.
    pub updates_per_collection: usize,
    pub exploration_noise: f64,
    pub seed_episodes: usize,
    pub total_env_steps: usize,
    /// Stop after this many gradient updates even if the step budget remains; 0 disables.
    #[serde(default)]
    pub max_updates: u64,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub behavior: BehaviorConfig,
    #[serde(default)]
    pub ablation: Ablation,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_eval_length() -> usize {
    1000
}

fn default_eval_episodes() -> usize {
    3
}

impl TrainConfig {
    /// Desk-scale schedule: `B = 32`, `T = 20`, 50 updates per 500-step
    /// episode, 50k environment steps.
    pub fn desk(task: Task) -> Self {
        let mut env = EnvConfig::new(task);
        env.episode_length = 500;
        Self {
            seed: 0,
            env,
            eval_episode_length: default_eval_length(),
            eval_episodes: default_eval_episodes(),
            eval_every: 0,
            batch_size: 32,
            chunk_length: 20,
            updates_per_collection: 50,
            exploration_noise: 0.3,
            seed_episodes: 5,
            total_env_steps: 50_000,
            max_updates: 0,
            model: ModelDims::default(),
            loss: LossWeights::default(),
            behavior: BehaviorConfig {
                imagination_starts: 128,
                ..BehaviorConfig::default()
            },
            ablation: Ablation::default(),
            checkpoint_every: 0,
        }
    }

    /// Original schedule: `B = 250`, `T = 50`, 100 updates per 1000 steps,
    /// 2·10⁶ environment steps, `D_s = 30`, `D_h = 200`.
    pub fn paper(task: Task) -> Self {
        let mut c = Self::desk(task);
        c.env.episode_length = 1000;
        c.batch_size = 250;
        c.chunk_length = 50;
        c.updates_per_collection = 100;
        c.total_env_steps = 2_000_000;
        let p = WorldModelConfig::paper(c.env.image_size, task.action_dim());
        c.model = ModelDims {
            latent_dim: p.latent_dim,
            recurrent_dim: p.recurrent_dim,
            hidden_dim: p.hidden_dim,
        };
        c.behavior.imagination_starts = 0;
        c
    }

    pub fn world_model_config(&self) -> WorldModelConfig {
        WorldModelConfig {
            image_size: self.env.image_size,
            channels: 1,
            action_dim: self.env.task.action_dim(),
            latent_dim: self.model.latent_dim,
            recurrent_dim: self.model.recurrent_dim,
            hidden_dim: self.model.hidden_dim,
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.ablation.weights(&self.loss)
    }

    pub fn flags(&self) -> ObjectiveFlags {
        self.ablation.flags()
    }

    /// Copy of the training environment used for evaluation.
    pub fn eval_env(&self) -> EnvConfig {
        let mut e = self.env.clone();
        e.episode_length = self.eval_episode_length;
        if let crate::envs::BackgroundSource::FrameDir { split, .. } = &mut e.background {
            *split = crate::envs::Split::Eval;
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.eval_env().validate()?;
        self.world_model_config().validate()?;
        self.loss.validate()?;
        self.behavior.validate()?;
        self.ablation.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.chunk_length < 2 {
            return Err(Error::Config("chunk_length must be at least 2".into()));
        }
        if self.chunk_length > self.env.decisions() + 1 {
            return Err(Error::Config(format!(
                "chunk_length {} exceeds the {} observations of a training episode",
                self.chunk_length,
                self.env.decisions() + 1
            )));
        }
        if self.seed_episodes < 1 {
            return Err(Error::Config("seed_episodes must be at least 1".into()));
        }
        if self.updates_per_collection < 1 {
            return Err(Error::Config("updates_per_collection must be at least 1".into()));
        }
        if !(self.exploration_noise >= 0.0) {
            return Err(Error::Config("exploration_noise must be non-negative".into()));
        }
        if self.eval_episodes < 1 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        Ok(())
    }
}
