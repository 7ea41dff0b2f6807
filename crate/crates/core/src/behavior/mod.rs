//! Actor-critic learned purely inside the world model.
//!
//! Policy and value networks read the full model state `[h, s]`. Rollouts
//! start from detached posterior states, sample actions with the
//! reparameterised tanh-Gaussian policy and latents from the dynamics prior,
//! and score them with the reward head mean and a periodically copied target
//! value network.

pub mod returns;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{Adam, BEHAVIOR_LR, DEFAULT_CLIP_NORM};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, shape_err, Result};
use crate::nn::{Activation, Bound, Mlp, ParamSet};
use crate::world_model::{check_state_dims, ModelState, WorldModel};
pub use returns::{lambda_return, lambda_return_vars, DEFAULT_GAMMA, DEFAULT_LAMBDA};

pub const DEFAULT_HORIZON: usize = 15;
pub const DEFAULT_TARGET_EVERY: u64 = 100;
pub const MEAN_SCALE: f64 = 5.0;
/// Actions are kept this far inside the open interval so that `atanh` of an
/// emitted action is always finite.
pub const ACTION_LIMIT: f64 = 1.0 - 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub target_every: u64,
    pub hidden_dim: usize,
    pub mean_scale: f64,
    /// Policy std at zero pre-activation.
    pub init_std: f64,
    pub min_std: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Number of start states drawn from each world-model batch; 0 keeps all.
    pub imagination_starts: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            target_every: DEFAULT_TARGET_EVERY,
            hidden_dim: 64,
            mean_scale: MEAN_SCALE,
            init_std: 5.0,
            min_std: 1e-4,
            learning_rate: BEHAVIOR_LR,
            clip_norm: DEFAULT_CLIP_NORM,
            imagination_starts: 0,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return contract("imagination horizon must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return contract(format!("gamma {} and lambda {} must lie in [0, 1]", self.gamma, self.lambda));
        }
        if self.target_every < 1 {
            return contract("target_every must be at least 1");
        }
        if self.hidden_dim == 0 {
            return contract("behavior hidden_dim must be positive");
        }
        if !(self.mean_scale > 0.0 && self.init_std > 0.0 && self.min_std >= 0.0) {
            return contract("policy scale, init_std must be positive and min_std non-negative");
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return contract("behavior learning rate and clip norm must be positive");
        }
        Ok(())
    }

    fn std_shift(&self) -> f64 {
        // softplus(shift) == init_std
        self.init_std.exp_m1().ln()
    }
}

/// Pre-tanh Gaussian of the policy, `N × A` each.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub mean: Var,
    pub std: Var,
}

impl PolicyVars {
    /// Reparameterised draw: returns `(u, tanh u)` for standard normal `eps`.
    pub fn sample(&self, tape: &mut Tape, eps: Var) -> Result<(Var, Var)> {
        let spread = tape.mul(self.std, eps)?;
        let u = tape.add(self.mean, spread)?;
        let a = tape.tanh(u)?;
        let a = tape.clamp(a, -ACTION_LIMIT, ACTION_LIMIT)?;
        Ok((u, a))
    }

    pub fn mode(&self, tape: &mut Tape) -> Result<Var> {
        let a = tape.tanh(self.mean)?;
        tape.clamp(a, -ACTION_LIMIT, ACTION_LIMIT)
    }
}

/// `ln 2 − u − softplus(−2u)`, which equals `½ ln(1 − tanh² u)` without
/// cancellation for large `|u|`.
fn half_log_tanh_jacobian(u: f64) -> f64 {
    std::f64::consts::LN_2 - u - softplus(-2.0 * u)
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of `tanh u` under the squashed policy, `N × 1`, given the
/// pre-tanh value `u`.
pub fn squashed_log_prob(tape: &mut Tape, dist: PolicyVars, u: Var) -> Result<Var> {
    let log_std = tape.log(dist.std)?;
    let diff = tape.sub(u, dist.mean)?;
    let inv = tape.neg(log_std)?;
    let inv = tape.exp(inv)?;
    let z = tape.mul(diff, inv)?;
    let zz = tape.square(z)?;
    let quad = tape.scale(zz, -0.5)?;
    let base = tape.sub(quad, log_std)?;
    let base = tape.add_scalar(base, -0.5 * (2.0 * std::f64::consts::PI).ln())?;
    // ln(1 − tanh² u) = 2(ln 2 − u − softplus(−2u))
    let neg2u = tape.scale(u, -2.0)?;
    let sp = tape.softplus(neg2u)?;
    let jac = tape.add(u, sp)?;
    let jac = tape.add_scalar(jac, -std::f64::consts::LN_2)?;
    let jac = tape.scale(jac, 2.0)?;
    // base − ln(1 − tanh² u) = base + 2(u + softplus(−2u) − ln 2)
    let per_dim = tape.add(base, jac)?;
    tape.sum_rows(per_dim)
}

/// Policy for one model state, with values rather than tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDist {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PolicyDist {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| (m + s * rng.sample::<f64, _>(StandardNormal)).tanh().clamp(-ACTION_LIMIT, ACTION_LIMIT))
            .collect()
    }

    pub fn mode(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh().clamp(-ACTION_LIMIT, ACTION_LIMIT)).collect()
    }

    /// Log-density of an action in `(−1, 1)^A`.
    pub fn log_prob(&self, action: &[f64]) -> f64 {
        let mut total = 0.0;
        for ((a, m), s) in action.iter().zip(&self.mean).zip(&self.std) {
            let u = a.atanh();
            let z = (u - m) / s;
            total += -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            total -= 2.0 * half_log_tanh_jacobian(u);
        }
        total
    }
}

/// How imagination draws actions and latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    /// Policy mode and prior mean: a deterministic rollout.
    Mode,
}

/// Parameters placed on one tape for a rollout.
pub struct RolloutParams<'a> {
    pub world: &'a Bound,
    pub policy: &'a Bound,
    pub target: &'a Bound,
}

/// Rollout variables. `h`, `s` and `values` hold `H + 1` entries, `actions`
/// and `rewards` hold `H`.
#[derive(Clone, Debug)]
pub struct ImaginationGraph {
    pub h: Vec<Var>,
    pub s: Vec<Var>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
    pub values: Vec<Var>,
}

impl ImaginationGraph {
    pub fn trajectory(&self, tape: &Tape) -> ImaginedTrajectory {
        let get = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        ImaginedTrajectory {
            h: get(&self.h),
            s: get(&self.s),
            actions: get(&self.actions),
            rewards: get(&self.rewards),
            values: get(&self.values),
        }
    }
}

/// Materialised rollout over `N` start states.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImaginedTrajectory {
    pub h: Vec<Tensor>,
    pub s: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.h, &self.s, &self.actions, &self.rewards, &self.values]
            .iter()
            .all(|xs| xs.iter().all(Tensor::is_finite))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStep {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub mean_return: f64,
    pub actor_grad_norm: f64,
    pub value_grad_norm: f64,
    pub target_updated: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Behavior {
    pub config: BehaviorConfig,
    pub recurrent_dim: usize,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub policy_params: ParamSet,
    pub value_params: ParamSet,
    pub target_params: ParamSet,
    pub actor_opt: Adam,
    pub value_opt: Adam,
    pub updates: u64,
    policy: Mlp,
    value: Mlp,
}

impl Behavior {
    pub fn new(
        config: BehaviorConfig,
        recurrent_dim: usize,
        latent_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if recurrent_dim == 0 || latent_dim == 0 || action_dim == 0 {
            return contract("behavior dimensions must be positive");
        }
        let input = recurrent_dim + latent_dim;
        let hid = config.hidden_dim;
        let mut policy_params = ParamSet::new();
        let policy = Mlp::new(
            &mut policy_params,
            "policy",
            &[input, hid, hid, 2 * action_dim],
            Activation::Elu,
            rng,
        );
        let mut value_params = ParamSet::new();
        let value = Mlp::new(&mut value_params, "value", &[input, hid, hid, 1], Activation::Elu, rng);
        let target_params = value_params.clone();
        let actor_opt = Adam::new(policy_params.tensors(), config.learning_rate, config.clip_norm);
        let value_opt = Adam::new(value_params.tensors(), config.learning_rate, config.clip_norm);
        Ok(Self {
            config,
            recurrent_dim,
            latent_dim,
            action_dim,
            policy_params,
            value_params,
            target_params,
            actor_opt,
            value_opt,
            updates: 0,
            policy,
            value,
        })
    }

    /// Builds a behavior sized for `wm`.
    pub fn for_world_model(config: BehaviorConfig, wm: &WorldModel, rng: &mut impl Rng) -> Result<Self> {
        let c = &wm.config;
        Self::new(config, c.recurrent_dim, c.latent_dim, c.action_dim, rng)
    }

    pub fn policy_net(&self) -> &Mlp {
        &self.policy
    }

    pub fn value_net(&self) -> &Mlp {
        &self.value
    }

    /// Policy distribution for `N` model states.
    pub fn policy_vars(&self, tape: &mut Tape, p: &Bound, h: Var, s: Var) -> Result<PolicyVars> {
        let a = self.action_dim;
        let x = tape.concat_cols(&[h, s])?;
        let out = self.policy.forward(tape, p, x)?;
        let m = tape.slice_cols(out, 0, a)?;
        let raw = tape.slice_cols(out, a, 2 * a)?;
        let k = self.config.mean_scale;
        let m = tape.scale(m, 1.0 / k)?;
        let m = tape.tanh(m)?;
        let mean = tape.scale(m, k)?;
        let raw = tape.add_scalar(raw, self.config.std_shift())?;
        let std = tape.softplus(raw)?;
        let std = tape.add_scalar(std, self.config.min_std)?;
        Ok(PolicyVars { mean, std })
    }

    /// Value of `N` model states under the network bound in `p` (online or target).
    pub fn value_vars(&self, tape: &mut Tape, p: &Bound, h: Var, s: Var) -> Result<Var> {
        let x = tape.concat_cols(&[h, s])?;
        self.value.forward(tape, p, x)
    }

    pub fn policy_dist(&self, state: &ModelState) -> Result<PolicyDist> {
        self.check_state(state)?;
        let mut tape = Tape::new();
        let p = self.policy_params.bind(&mut tape, false)?;
        let h = tape.constant(Tensor::row(&state.h))?;
        let s = tape.constant(Tensor::row(&state.s))?;
        let d = self.policy_vars(&mut tape, &p, h, s)?;
        Ok(PolicyDist {
            mean: tape.value(d.mean).data().to_vec(),
            std: tape.value(d.std).data().to_vec(),
        })
    }

    /// Online (`target == false`) or target value of one model state.
    pub fn value_of(&self, state: &ModelState, target: bool) -> Result<f64> {
        self.check_state(state)?;
        let params = if target { &self.target_params } else { &self.value_params };
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false)?;
        let h = tape.constant(Tensor::row(&state.h))?;
        let s = tape.constant(Tensor::row(&state.s))?;
        let v = self.value_vars(&mut tape, &p, h, s)?;
        Ok(tape.item(v))
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.h.len() != self.recurrent_dim || state.s.len() != self.latent_dim {
            return shape_err(format!(
                "model state has D_h={}, D_s={}; behavior expects {}, {}",
                state.h.len(),
                state.s.len(),
                self.recurrent_dim,
                self.latent_dim
            ));
        }
        Ok(())
    }

    /// Rolls `horizon` steps from detached `N × D_h`, `N × D_s` starts.
    #[allow(clippy::too_many_arguments)]
    pub fn imagine(
        &self,
        tape: &mut Tape,
        wm: &WorldModel,
        params: &RolloutParams<'_>,
        start_h: Var,
        start_s: Var,
        horizon: usize,
        sampling: Sampling,
        rng: &mut impl Rng,
    ) -> Result<ImaginationGraph> {
        if horizon < 1 {
            return contract("imagination horizon must be at least 1");
        }
        if tape.requires_grad(start_h) || tape.requires_grad(start_s) {
            return contract("imagination start states must be detached");
        }
        check_state_dims(&wm.config, tape.value(start_h), tape.value(start_s))?;
        if wm.config.action_dim != self.action_dim
            || wm.config.latent_dim != self.latent_dim
            || wm.config.recurrent_dim != self.recurrent_dim
        {
            return shape_err("behavior and world model dimensions differ");
        }
        let n = tape.shape(start_h)[0];
        let (d, a_dim) = (self.latent_dim, self.action_dim);

        let mut g = ImaginationGraph {
            h: vec![start_h],
            s: vec![start_s],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            values: Vec::with_capacity(horizon + 1),
        };
        for _ in 0..horizon {
            let (h, s) = (*g.h.last().unwrap(), *g.s.last().unwrap());
            let dist = self.policy_vars(tape, params.policy, h, s)?;
            let action = match sampling {
                Sampling::Stochastic => {
                    let eps = tape.constant(standard_normal(rng, n, a_dim))?;
                    dist.sample(tape, eps)?.1
                }
                Sampling::Mode => dist.mode(tape)?,
            };
            g.rewards.push(wm.reward(tape, params.world, s)?);
            let h_next = wm.rssm_step(tape, params.world, h, s, action)?;
            let prior = wm.prior(tape, params.world, h_next)?;
            let s_next = match sampling {
                Sampling::Stochastic => {
                    let eps = tape.constant(standard_normal(rng, n, d))?;
                    let std = tape.exp(prior.log_std)?;
                    let spread = tape.mul(std, eps)?;
                    tape.add(prior.mean, spread)?
                }
                Sampling::Mode => prior.mean,
            };
            g.actions.push(action);
            g.h.push(h_next);
            g.s.push(s_next);
        }
        for k in 0..=horizon {
            let v = self.value_vars(tape, params.target, g.h[k], g.s[k])?;
            g.values.push(v);
        }
        Ok(g)
    }

    /// `V_λ` for every imagined state, `H + 1` entries of `N × 1`, the last
    /// being the bootstrap value itself.
    pub fn returns(&self, tape: &mut Tape, g: &ImaginationGraph) -> Result<Vec<Var>> {
        let mut out = lambda_return_vars(tape, &g.rewards, &g.values, self.config.gamma, self.config.lambda)?;
        out.push(*g.values.last().expect("rollout has values"));
        Ok(out)
    }

    /// `−mean_n Σ_{τ=t}^{t+H} V_λ(s_τ)`.
    pub fn actor_loss(&self, tape: &mut Tape, returns: &[Var]) -> Result<Var> {
        let mut total = returns[0];
        for &r in &returns[1..] {
            total = tape.add(total, r)?;
        }
        let m = tape.mean(total)?;
        tape.neg(m)
    }

    /// Mean over starts and `τ = t..t+H` of `½ (v(s_τ) − V_λ(s_τ))²`, with
    /// states and targets detached.
    pub fn value_loss(&self, tape: &mut Tape, value: &Bound, g: &ImaginationGraph, returns: &[Var]) -> Result<Var> {
        if returns.len() != g.h.len() {
            return shape_err(format!("{} returns for {} states", returns.len(), g.h.len()));
        }
        let mut hs = Vec::with_capacity(g.h.len());
        let mut ss = Vec::with_capacity(g.h.len());
        let mut targets = Vec::with_capacity(g.h.len());
        for k in 0..g.h.len() {
            hs.push(tape.detach(g.h[k])?);
            ss.push(tape.detach(g.s[k])?);
            targets.push(tape.detach(returns[k])?);
        }
        let h = tape.concat_rows(&hs)?;
        let s = tape.concat_rows(&ss)?;
        let target = tape.concat_rows(&targets)?;
        let v = self.value_vars(tape, value, h, s)?;
        let err = tape.sub(v, target)?;
        let sq = tape.square(err)?;
        let m = tape.mean(sq)?;
        tape.scale(m, 0.5)
    }

    /// One actor step and one value step from `N` detached model states,
    /// followed by the scheduled target copy.
    pub fn train_step(
        &mut self,
        wm: &WorldModel,
        start_h: &Tensor,
        start_s: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<BehaviorStep> {
        check_state_dims(&wm.config, start_h, start_s)?;
        let n = start_h.rows();
        let (start_h, start_s) = match self.config.imagination_starts {
            k if k == 0 || k >= n => (start_h.clone(), start_s.clone()),
            k => {
                let mut idx = sample_indices(rng, n, k).into_vec();
                idx.sort_unstable();
                (take_rows(start_h, &idx)?, take_rows(start_s, &idx)?)
            }
        };

        let mut tape = Tape::new();
        let world = wm.params.bind(&mut tape, false)?;
        let policy = self.policy_params.bind(&mut tape, true)?;
        let target = self.target_params.bind(&mut tape, false)?;
        let value = self.value_params.bind(&mut tape, true)?;
        let h0 = tape.constant(start_h)?;
        let s0 = tape.constant(start_s)?;
        let rp = RolloutParams {
            world: &world,
            policy: &policy,
            target: &target,
        };
        let g = self.imagine(&mut tape, wm, &rp, h0, s0, self.config.horizon, Sampling::Stochastic, rng)?;
        let returns = self.returns(&mut tape, &g)?;
        let actor = self.actor_loss(&mut tape, &returns)?;
        let critic = self.value_loss(&mut tape, &value, &g, &returns)?;

        let mean_return = {
            let total: f64 = returns.iter().map(|&r| tape.value(r).data().iter().sum::<f64>()).sum();
            total / (returns.len() * tape.shape(returns[0])[0]) as f64
        };
        let actor_grads = tape.backward(actor)?;
        let actor_grads = policy.grads(&tape, &actor_grads);
        let value_grads = tape.backward(critic)?;
        let value_grads = value.grads(&tape, &value_grads);
        let actor_grad_norm = self.actor_opt.step(self.policy_params.tensors_mut(), actor_grads)?;
        let value_grad_norm = self.value_opt.step(self.value_params.tensors_mut(), value_grads)?;
        self.updates += 1;
        let target_updated = update_target(
            &self.value_params,
            &mut self.target_params,
            self.updates,
            self.config.target_every,
        )?;
        Ok(BehaviorStep {
            actor_loss: tape.item(actor),
            value_loss: tape.item(critic),
            mean_return,
            actor_grad_norm,
            value_grad_norm,
            target_updated,
        })
    }
}

/// Hard copy of `value` into `target` when `step_count` is a multiple of
/// `every`. Returns whether a copy happened.
pub fn update_target(value: &ParamSet, target: &mut ParamSet, step_count: u64, every: u64) -> Result<bool> {
    if every < 1 {
        return contract("target update interval must be at least 1");
    }
    if step_count % every == 0 {
        target.copy_from(value)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn take_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::matrix(idx.len(), c, data)
}
