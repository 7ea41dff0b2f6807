//! JSON checkpoints: a flat map from parameter path to shape and row-major
//! values, plus the run configuration and counters.
//!
//! Paths:
//! `world_model/<param>`, `behavior/{policy,value,target}/<param>` and
//! `optimizer/{world_model,actor,value}/{m,v}/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::autodiff::optim::Adam;
use crate::autodiff::Tensor;
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::nn::ParamSet;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub env_steps: usize,
    pub grad_steps: u64,
    pub iterations: u64,
    pub behavior_updates: u64,
    pub world_model_opt_steps: u64,
    pub actor_opt_steps: u64,
    pub value_opt_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub counters: Counters,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn put(map: &mut BTreeMap<String, TensorEntry>, prefix: &str, names: &[String], tensors: &[Tensor]) {
    for (n, t) in names.iter().zip(tensors) {
        map.insert(
            format!("{prefix}/{n}"),
            TensorEntry {
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            },
        );
    }
}

fn take(map: &BTreeMap<String, TensorEntry>, prefix: &str, names: &[String], dst: &mut [Tensor]) -> Result<()> {
    for (n, t) in names.iter().zip(dst.iter_mut()) {
        let key = format!("{prefix}/{n}");
        let e = map
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if e.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{key}: checkpoint shape {:?} does not match model shape {:?}",
                e.shape,
                t.shape()
            )));
        }
        *t = Tensor::new(e.shape.clone(), e.values.clone()).map_err(|err| Error::Checkpoint(format!("{key}: {err}")))?;
    }
    Ok(())
}

fn put_opt(map: &mut BTreeMap<String, TensorEntry>, prefix: &str, names: &[String], opt: &Adam) {
    put(map, &format!("{prefix}/m"), names, &opt.state.first_moment);
    put(map, &format!("{prefix}/v"), names, &opt.state.second_moment);
}

fn take_opt(map: &BTreeMap<String, TensorEntry>, prefix: &str, names: &[String], opt: &mut Adam, steps: u64) -> Result<()> {
    take(map, &format!("{prefix}/m"), names, &mut opt.state.first_moment)?;
    take(map, &format!("{prefix}/v"), names, &mut opt.state.second_moment)?;
    opt.state.step_count = steps;
    Ok(())
}

fn set(params: &mut ParamSet, map: &BTreeMap<String, TensorEntry>, prefix: &str) -> Result<()> {
    let names = params.names().to_vec();
    take(map, prefix, &names, params.tensors_mut())
}

impl Checkpoint {
    pub fn capture(agent: &Agent, config: &TrainConfig, mut counters: Counters) -> Self {
        let mut tensors = BTreeMap::new();
        let wm = &agent.world_model.params;
        let b = &agent.behavior;
        put(&mut tensors, "world_model", wm.names(), wm.tensors());
        put(&mut tensors, "behavior/policy", b.policy_params.names(), b.policy_params.tensors());
        put(&mut tensors, "behavior/value", b.value_params.names(), b.value_params.tensors());
        put(&mut tensors, "behavior/target", b.target_params.names(), b.target_params.tensors());
        put_opt(&mut tensors, "optimizer/world_model", wm.names(), &agent.wm_opt);
        put_opt(&mut tensors, "optimizer/actor", b.policy_params.names(), &b.actor_opt);
        put_opt(&mut tensors, "optimizer/value", b.value_params.names(), &b.value_opt);
        counters.behavior_updates = b.updates;
        counters.world_model_opt_steps = agent.wm_opt.state.step_count;
        counters.actor_opt_steps = b.actor_opt.state.step_count;
        counters.value_opt_steps = b.value_opt.state.step_count;
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            counters,
            tensors,
        }
    }

    /// Rebuilds the agent described by the stored configuration.
    pub fn restore(&self) -> Result<Agent> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agent = Agent::new(self.config.world_model_config(), self.config.behavior.clone(), &mut rng)?;
        let c = &self.counters;
        let t = &self.tensors;
        set(&mut agent.world_model.params, t, "world_model")?;
        let b = &mut agent.behavior;
        set(&mut b.policy_params, t, "behavior/policy")?;
        set(&mut b.value_params, t, "behavior/value")?;
        set(&mut b.target_params, t, "behavior/target")?;
        let wm_names = agent.world_model.params.names().to_vec();
        take_opt(t, "optimizer/world_model", &wm_names, &mut agent.wm_opt, c.world_model_opt_steps)?;
        let b = &mut agent.behavior;
        let (pn, vn) = (b.policy_params.names().to_vec(), b.value_params.names().to_vec());
        take_opt(t, "optimizer/actor", &pn, &mut b.actor_opt, c.actor_opt_steps)?;
        take_opt(t, "optimizer/value", &vn, &mut b.value_opt, c.value_opt_steps)?;
        b.updates = c.behavior_updates;
        Ok(agent)
    }

    /// Fails unless an environment with `env` produces observations and
    /// accepts actions of the stored model's sizes.
    pub fn check_env(&self, env: &EnvConfig) -> Result<()> {
        let wm = self.config.world_model_config();
        if env.image_size != wm.image_size {
            return Err(Error::Checkpoint(format!(
                "environment renders {0}x{0} images but the checkpoint expects {1}x{1}",
                env.image_size, wm.image_size
            )));
        }
        if env.task.action_dim() != wm.action_dim {
            return Err(Error::Checkpoint(format!(
                "task {} has {} action dimensions but the checkpoint expects {}",
                env.task.name(),
                env.task.action_dim(),
                wm.action_dim
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
