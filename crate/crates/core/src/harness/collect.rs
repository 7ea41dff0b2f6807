//! Running policies in an environment and recording episodes.

use rand::Rng;

use crate::agent::Agent;
use crate::behavior::ACTION_LIMIT;
use crate::envs::Env;
use crate::error::{contract, Result};
use crate::harness::replay::{Episode, ReplayBuffer};

/// Who picks the actions.
#[derive(Clone, Copy)]
pub enum Actor<'a> {
    /// Uniform in `(−1, 1)` per coordinate.
    Random,
    /// The agent's mode action plus Gaussian noise of this std.
    Agent(&'a Agent, f64),
}

/// Runs one full episode from `env.reset(seed)`.
pub fn run_episode(env: &mut Env, seed: u64, actor: Actor<'_>, rng: &mut impl Rng) -> Result<Episode> {
    let obs = env.reset(seed);
    let repeat = env.config().action_repeat as f64;
    let mut ep = Episode {
        obs: vec![obs.flat().to_vec()],
        actions: Vec::new(),
        rewards: vec![repeat * env.state_reward()],
        states: vec![env.state().physical],
    };
    let mut model_state = match actor {
        Actor::Agent(agent, _) => {
            let mut st = agent.initial_state();
            agent.observe(&mut st, &obs)?;
            Some(st)
        }
        Actor::Random => None,
    };
    let dim = env.action_dim();
    loop {
        let action = match (actor, model_state.as_mut()) {
            (Actor::Agent(agent, noise), Some(st)) => agent.act(st, noise, rng)?,
            _ => (0..dim).map(|_| rng.gen_range(-ACTION_LIMIT..ACTION_LIMIT)).collect(),
        };
        let r = env.step(&action)?;
        if let (Actor::Agent(agent, _), Some(st)) = (actor, model_state.as_mut()) {
            agent.advance(st, &action)?;
            agent.observe(st, &r.obs)?;
        }
        ep.actions.push(action);
        ep.obs.push(r.obs.flat().to_vec());
        ep.rewards.push(r.reward);
        ep.states.push(r.info);
        if r.done {
            break;
        }
    }
    ep.actions.push(vec![0.0; dim]);
    Ok(ep)
}

/// Fills `buffer` with `count` uniformly random episodes.
pub fn seed_dataset(
    env: &mut Env,
    buffer: &mut ReplayBuffer,
    count: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if count < 1 {
        return contract("at least one seed episode is required");
    }
    for _ in 0..count {
        let seed = rng.gen();
        buffer.push(run_episode(env, seed, Actor::Random, rng)?)?;
    }
    Ok(())
}

/// Returns of `episodes` episodes under `actor`, with seeds drawn from `rng`.
pub fn episode_returns(env: &mut Env, episodes: usize, actor: Actor<'_>, rng: &mut impl Rng) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|_| {
            let seed = rng.gen();
            Ok(run_episode(env, seed, actor, rng)?.total_return())
        })
        .collect()
}
