//! Alternating model updates and data collection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::Agent;
use crate::checkpoint::{Checkpoint, Counters};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::harness::collect::{episode_returns, run_episode, seed_dataset, Actor};
use crate::harness::config::TrainConfig;
use crate::harness::replay::ReplayBuffer;
use crate::metrics::{MetricsSink, Record};

/// Averages over the updates of one iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationReport {
    pub iteration: u64,
    pub env_steps: usize,
    pub grad_steps: u64,
    pub episode_return: f64,
    pub tpc: f64,
    pub consistency: f64,
    pub spc: f64,
    pub reward_ll: f64,
    pub objective: f64,
    pub latent_std: f64,
    pub min_latent_std: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub mean_value_target: f64,
    pub wm_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub value_grad_norm: f64,
}

impl IterationReport {
    pub fn record(&self) -> Record {
        Record::new(self.grad_steps, "train")
            .with("env_steps", self.env_steps as f64)
            .with("grad_steps", self.grad_steps as f64)
            .with("episode_return", self.episode_return)
            .with("tpc", self.tpc)
            .with("consistency", self.consistency)
            .with("spc", self.spc)
            .with("reward_ll", self.reward_ll)
            .with("objective", self.objective)
            .with("latent_std", self.latent_std)
            .with("min_latent_std", self.min_latent_std)
            .with("actor_loss", self.actor_loss)
            .with("value_loss", self.value_loss)
            .with("mean_value_target", self.mean_value_target)
            .with("wm_grad_norm", self.wm_grad_norm)
            .with("actor_grad_norm", self.actor_grad_norm)
            .with("value_grad_norm", self.value_grad_norm)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub env_steps: usize,
    pub grad_steps: u64,
    pub iterations: u64,
    pub final_eval: Vec<f64>,
    pub min_latent_std: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    env: Env,
    rng: ChaCha8Rng,
    pub env_steps: usize,
    pub grad_steps: u64,
    pub iterations: u64,
    /// Smallest batch latent std seen in any update so far.
    pub min_latent_std: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let agent = Agent::new(config.world_model_config(), config.behavior.clone(), &mut rng)?;
        let env = Env::new(config.env.clone())?;
        Ok(Self {
            config,
            agent,
            buffer: ReplayBuffer::new(),
            env,
            rng,
            env_steps: 0,
            grad_steps: 0,
            iterations: 0,
            min_latent_std: f64::INFINITY,
        })
    }

    /// Stores `seed_episodes` random episodes.
    pub fn seed_dataset(&mut self) -> Result<()> {
        let before = self.buffer.len();
        seed_dataset(&mut self.env, &mut self.buffer, self.config.seed_episodes, &mut self.rng)?;
        self.env_steps += (self.buffer.len() - before) * self.config.env.episode_length;
        Ok(())
    }

    pub fn budget_left(&self) -> bool {
        let steps = self.env_steps < self.config.total_env_steps;
        let updates = self.config.max_updates == 0 || self.grad_steps < self.config.max_updates;
        steps && updates
    }

    /// `G` joint updates, then one exploration episode.
    pub fn train_iteration(&mut self) -> Result<IterationReport> {
        if self.buffer.is_empty() {
            return Err(Error::Contract("train_iteration needs a seeded buffer".into()));
        }
        let c = &self.config;
        let (weights, flags) = (c.weights(), c.flags());
        let g = c.updates_per_collection;
        let mut rep = IterationReport {
            min_latent_std: f64::INFINITY,
            ..IterationReport::default()
        };
        let mut done = 0usize;
        for _ in 0..g {
            if self.config.max_updates > 0 && self.grad_steps >= self.config.max_updates {
                break;
            }
            let batch = self
                .buffer
                .sample(self.config.batch_size, self.config.chunk_length, &mut self.rng)?;
            let step = self.agent.update(&batch, &weights, flags, &mut self.rng)?;
            let l = &step.world.losses;
            let b = &step.behavior;
            let values = [l.tpc, l.consistency, l.spc, l.reward, l.total, b.actor_loss, b.value_loss];
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("loss value {v} at gradient step {}", self.grad_steps)));
            }
            rep.tpc += l.tpc;
            rep.consistency += l.consistency;
            rep.spc += l.spc;
            rep.reward_ll += l.reward;
            rep.objective += l.total;
            rep.latent_std += l.latent_std;
            rep.min_latent_std = rep.min_latent_std.min(l.latent_std);
            rep.actor_loss += b.actor_loss;
            rep.value_loss += b.value_loss;
            rep.mean_value_target += b.mean_return;
            rep.wm_grad_norm += step.world.grad_norm;
            rep.actor_grad_norm += b.actor_grad_norm;
            rep.value_grad_norm += b.value_grad_norm;
            self.grad_steps += 1;
            done += 1;
        }
        if done > 0 {
            let k = done as f64;
            for v in [
                &mut rep.tpc,
                &mut rep.consistency,
                &mut rep.spc,
                &mut rep.reward_ll,
                &mut rep.objective,
                &mut rep.latent_std,
                &mut rep.actor_loss,
                &mut rep.value_loss,
                &mut rep.mean_value_target,
                &mut rep.wm_grad_norm,
                &mut rep.actor_grad_norm,
                &mut rep.value_grad_norm,
            ] {
                *v /= k;
            }
        }
        self.min_latent_std = self.min_latent_std.min(rep.min_latent_std);

        let seed = self.rng.gen();
        let noise = self.config.exploration_noise;
        let episode = run_episode(&mut self.env, seed, Actor::Agent(&self.agent, noise), &mut self.rng)?;
        rep.episode_return = episode.total_return();
        self.buffer.push(episode)?;
        self.env_steps += self.config.env.episode_length;
        self.iterations += 1;
        rep.iteration = self.iterations;
        rep.env_steps = self.env_steps;
        rep.grad_steps = self.grad_steps;
        Ok(rep)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let counters = Counters {
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            iterations: self.iterations,
            ..Counters::default()
        };
        Checkpoint::capture(&self.agent, &self.config, counters)
    }

    /// Deterministic-policy returns on evaluation-length episodes.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<Vec<f64>> {
        evaluate_agent(&self.agent, &self.config, episodes, seed)
    }

    /// Seeds the buffer, iterates until the budget is spent and evaluates.
    pub fn run(&mut self, sink: &mut dyn MetricsSink) -> Result<RunSummary> {
        self.run_with(sink, &mut |_| Ok(()))
    }

    /// Like [`run`](Self::run), calling `after_iteration` once per iteration.
    pub fn run_with(
        &mut self,
        sink: &mut dyn MetricsSink,
        after_iteration: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<RunSummary> {
        let result = self.run_inner(sink, after_iteration);
        if result.is_err() {
            let rec = Record::new(self.grad_steps, "error")
                .with("env_steps", self.env_steps as f64)
                .with("grad_steps", self.grad_steps as f64);
            sink.emit(&rec)?;
        }
        result
    }

    fn run_inner(
        &mut self,
        sink: &mut dyn MetricsSink,
        after_iteration: &mut dyn FnMut(&Trainer) -> Result<()>,
    ) -> Result<RunSummary> {
        if self.buffer.is_empty() {
            self.seed_dataset()?;
        }
        let mut final_eval = Vec::new();
        while self.budget_left() {
            let rep = self.train_iteration()?;
            sink.emit(&rep.record())?;
            after_iteration(self)?;
            let every = self.config.eval_every;
            if every > 0 && self.iterations % every as u64 == 0 && self.budget_left() {
                self.emit_eval(sink)?;
            }
        }
        final_eval.extend(self.emit_eval(sink)?);
        Ok(RunSummary {
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            iterations: self.iterations,
            final_eval,
            min_latent_std: self.min_latent_std,
        })
    }

    fn emit_eval(&mut self, sink: &mut dyn MetricsSink) -> Result<Vec<f64>> {
        let returns = self.evaluate(self.config.eval_episodes, self.config.seed ^ 0x5eed_e7a1)?;
        let (mean, std) = mean_std(&returns);
        let rec = Record::new(self.grad_steps, "eval")
            .with("env_steps", self.env_steps as f64)
            .with("grad_steps", self.grad_steps as f64)
            .with("eval_return", mean)
            .with("eval_return_std", std);
        sink.emit(&rec)?;
        Ok(returns)
    }
}

/// Mode-action returns of `agent` on the evaluation environment of `config`.
pub fn evaluate_agent(agent: &Agent, config: &TrainConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut env = Env::new(config.eval_env())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episode_returns(&mut env, episodes, Actor::Agent(agent, 0.0), &mut rng)
}

/// Uniform-random-policy returns on the evaluation environment of `config`.
pub fn random_returns(config: &TrainConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut env = Env::new(config.eval_env())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episode_returns(&mut env, episodes, Actor::Random, &mut rng)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
