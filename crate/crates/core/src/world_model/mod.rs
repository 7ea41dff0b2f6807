//! Encoder, recurrent state-space dynamics and reward head, trained with
//! temporal predictive coding, consistency, static predictive coding and
//! reward likelihood.
//!
//! The encoder sees only the current frame: `s_t = E(o_t)`. The dynamics
//! carry a deterministic state `h_t = GRU(h_{t−1}, s_{t−1}, a_{t−1})` and
//! predict `p(s_t | h_t)` as a diagonal Gaussian. That prediction doubles as
//! the critic of the temporal contrastive bound, so there are no separate
//! critic parameters.

pub mod objectives;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{Adam, DEFAULT_CLIP_NORM, WORLD_MODEL_LR};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, shape_err, Error, Result};
use crate::nn::{Activation, Bound, Dense, GruCell, Mlp, ParamSet};
pub use objectives::GaussianVars;
use objectives::{
    gaussian_log_prob, require_negatives, spc_loss as spc_bound, tpc_step, unit_gaussian_log_likelihood,
};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Std of the pixel jitter producing the second view for static predictive coding.
pub const SPC_VIEW_JITTER: f64 = 0.01;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DYNAMICS_PREFIX: &str = "dynamics.";
pub const REWARD_PREFIX: &str = "reward.";

/// Image observation, `C × H × W`, values in `[−0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pixels: Tensor,
}

impl Observation {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 {
            return shape_err(format!("observation must be C×H×W, got {:?}", pixels.shape()));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(-0.5..=0.5).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [-0.5, 0.5]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn flat(&self) -> &[f64] {
        self.pixels.data()
    }
}

/// Deterministic recurrent state `h` and stochastic latent `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub h: Vec<f64>,
    pub s: Vec<f64>,
}

/// Diagonal Gaussian with values outside any tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return shape_err(format!("mean dim {} vs log_std dim {}", mean.len(), log_std.len()));
        }
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let mut lp = -0.5 * self.dim() as f64 * (2.0 * PI).ln();
        for ((xv, m), ls) in x.iter().zip(&self.mean).zip(&self.log_std) {
            let z = (xv - m) * (-ls).exp();
            lp += -0.5 * z * z - ls;
        }
        lp
    }

    /// Reparameterized sample `mean + exp(log_std) · ε`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Dynamics-associated smoothing: `s + ε` with `ε ~ N(0, diag(exp(2 log_std)))`
/// taken from the dynamics' own prediction at this step.
pub fn smooth_inputs(s: &[f64], prior: &DiagGaussian, rng: &mut impl Rng) -> Vec<f64> {
    s.iter()
        .zip(&prior.log_std)
        .map(|(v, ls)| v + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub recurrent_dim: usize,
    pub hidden_dim: usize,
}

impl WorldModelConfig {
    /// Desk-scale defaults: 16×16 grayscale, `D_s = 10`, `D_h = 40`.
    pub fn desk(action_dim: usize) -> Self {
        Self {
            image_size: 16,
            channels: 1,
            action_dim,
            latent_dim: 10,
            recurrent_dim: 40,
            hidden_dim: 64,
        }
    }

    /// Original dimensions: `D_s = 30`, `D_h = 200`.
    pub fn paper(image_size: usize, action_dim: usize) -> Self {
        Self {
            image_size,
            channels: 1,
            action_dim,
            latent_dim: 30,
            recurrent_dim: 200,
            hidden_dim: 200,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if [self.image_size, self.channels, self.action_dim, self.latent_dim, self.recurrent_dim, self.hidden_dim]
            .contains(&0)
        {
            return Err(Error::Config(format!("world model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Objective weights and noise scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub spc_sigma: f64,
    pub tpc_noise: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 1.0,
            lambda4: 1.0,
            spc_sigma: 0.2,
            tpc_noise: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if ls.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {ls:?}")));
        }
        if !(self.spc_sigma > 0.0) || !(self.tpc_noise > 0.0) {
            return Err(Error::Config("spc_sigma and tpc_noise must be positive".into()));
        }
        Ok(())
    }
}

/// Switches that change which paths the objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveFlags {
    /// Inject dynamics-associated noise into the recurrent inputs.
    pub smoothing: bool,
    /// Stop reward-likelihood gradients at the encoder output.
    pub separate_reward: bool,
}

impl Default for ObjectiveFlags {
    fn default() -> Self {
        Self {
            smoothing: true,
            separate_reward: false,
        }
    }
}

/// `B` sequences of length `T`, stored time-major: row `t·B + b`.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub batch: usize,
    pub length: usize,
    /// `(T·B) × obs_dim`
    pub obs: Tensor,
    /// `(T·B) × action_dim`; the action at row `t·B + b` follows observation `t`.
    pub actions: Tensor,
    /// `(T·B) × 1`; reward associated with observation `t`.
    pub rewards: Tensor,
}

impl TrajectoryBatch {
    pub fn validate(&self, cfg: &WorldModelConfig) -> Result<()> {
        let n = self.batch * self.length;
        if self.obs.shape() != [n, cfg.obs_dim()]
            || self.actions.shape() != [n, cfg.action_dim]
            || self.rewards.shape() != [n, 1]
        {
            return shape_err(format!(
                "batch B={} T={}: obs {:?}, actions {:?}, rewards {:?}",
                self.batch,
                self.length,
                self.obs.shape(),
                self.actions.shape(),
                self.rewards.shape()
            ));
        }
        Ok(())
    }
}

/// Recurrent states and dynamics predictions along a batch of sequences.
pub struct Unroll {
    /// `h_t` for `t = 0..T`, each `B × D_h`; `h_0` is the zero state.
    pub h: Vec<Var>,
    /// `p(s_t | h_t)` for `t = 0..T`.
    pub priors: Vec<GaussianVars>,
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tpc: f64,
    pub consistency: f64,
    pub spc: f64,
    pub reward: f64,
    /// Weighted objective (maximized).
    pub total: f64,
    /// Mean over latent dimensions of the batch standard deviation of `E(o)`.
    pub latent_std: f64,
}

/// Objective on a tape together with the intermediate quantities.
pub struct ObjectiveGraph {
    pub objective: Var,
    pub tpc: Var,
    pub consistency: Var,
    pub spc: Var,
    pub reward: Var,
    /// `E(o)` for every row, `(T·B) × D_s`.
    pub latents: Var,
    pub unroll: Unroll,
}

/// Result of one world-model gradient step.
pub struct WorldModelStep {
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    /// Detached `h_t` for every batch row, `(T·B) × D_h`.
    pub start_h: Tensor,
    /// Detached `s_t = E(o_t)` for every batch row, `(T·B) × D_s`.
    pub start_s: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub params: ParamSet,
    encoder: Mlp,
    rssm_input: Dense,
    gru: GruCell,
    prior_net: Mlp,
    reward_net: Mlp,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamSet::new();
        let encoder = Mlp::new(
            &mut params,
            "encoder",
            &[c.obs_dim(), c.hidden_dim, c.hidden_dim, c.latent_dim],
            Activation::Elu,
            rng,
        );
        let rssm_input = Dense::new(&mut params, "dynamics.input", c.latent_dim + c.action_dim, c.hidden_dim, rng);
        let gru = GruCell::new(&mut params, "dynamics.gru", c.hidden_dim, c.recurrent_dim, rng);
        let prior_net = Mlp::new(
            &mut params,
            "dynamics.prior",
            &[c.recurrent_dim, c.hidden_dim, 2 * c.latent_dim],
            Activation::Elu,
            rng,
        );
        let reward_net = Mlp::new(
            &mut params,
            "reward",
            &[c.latent_dim, c.hidden_dim, c.hidden_dim, 1],
            Activation::Elu,
            rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            rssm_input,
            gru,
            prior_net,
            reward_net,
        })
    }

    pub fn encoder_net(&self) -> &Mlp {
        &self.encoder
    }

    pub fn gru(&self) -> &GruCell {
        &self.gru
    }

    pub fn rssm_input(&self) -> &Dense {
        &self.rssm_input
    }

    pub fn prior_net(&self) -> &Mlp {
        &self.prior_net
    }

    pub fn reward_net(&self) -> &Mlp {
        &self.reward_net
    }

    /// `N × obs_dim → N × D_s`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, obs: Var) -> Result<Var> {
        if tape.shape(obs)[1] != self.config.obs_dim() {
            return shape_err(format!(
                "observation has {} pixels, configured image is {}",
                tape.shape(obs)[1],
                self.config.obs_dim()
            ));
        }
        self.encoder.forward(tape, p, obs)
    }

    /// `h' = GRU(h, ELU([s, a] W + b))`.
    pub fn rssm_step(&self, tape: &mut Tape, p: &Bound, h: Var, s: Var, a: Var) -> Result<Var> {
        let x = tape.concat_cols(&[s, a])?;
        let x = self.rssm_input.forward(tape, p, x)?;
        let x = tape.elu(x)?;
        self.gru.forward(tape, p, x, h)
    }

    pub fn prior(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<GaussianVars> {
        let d = self.config.latent_dim;
        let out = self.prior_net.forward(tape, p, h)?;
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(GaussianVars { mean, log_std })
    }

    /// Mean of the unit-variance reward head, `N × 1`.
    pub fn reward(&self, tape: &mut Tape, p: &Bound, s: Var) -> Result<Var> {
        self.reward_net.forward(tape, p, s)
    }

    /// Rolls the dynamics along observed latents and actions.
    ///
    /// With `smoothing`, the latent fed to the recurrent cell at every step is
    /// perturbed by noise with the dynamics' own predicted (detached) std.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latents: &[Var],
        actions: &[Var],
        mut smoothing: Option<&mut dyn rand::RngCore>,
    ) -> Result<Unroll> {
        let t_len = latents.len();
        if t_len == 0 || actions.len() + 1 < t_len {
            return shape_err(format!("unroll: {} latents, {} actions", t_len, actions.len()));
        }
        let b = tape.shape(latents[0])[0];
        let mut h = tape.constant(Tensor::zeros(vec![b, self.config.recurrent_dim]))?;
        let mut hs = Vec::with_capacity(t_len);
        let mut priors = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let prior = self.prior(tape, p, h)?;
            hs.push(h);
            priors.push(prior);
            if t + 1 == t_len {
                break;
            }
            let input = match smoothing.as_deref_mut() {
                Some(rng) => {
                    let ls = tape.value(prior.log_std);
                    let noise = Tensor::from_fn(ls.rows(), ls.cols(), |i, j| {
                        ls.at(i, j).exp() * rng.sample::<f64, _>(StandardNormal)
                    });
                    let noise = tape.constant(noise)?;
                    tape.add(latents[t], noise)?
                }
                None => latents[t],
            };
            h = self.rssm_step(tape, p, h, input, actions[t])?;
        }
        Ok(Unroll { h: hs, priors })
    }

    /// `Σ_{t≥2}` of the per-step InfoNCE bound with the dynamics as critic.
    /// Fixed noise of std `noise_std` is added to each future latent.
    pub fn tpc_term(
        &self,
        tape: &mut Tape,
        latents: &[Var],
        unroll: &Unroll,
        noise_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut total = tape.scalar(0.0)?;
        for t in 1..latents.len() {
            let (b, d) = (tape.shape(latents[t])[0], tape.shape(latents[t])[1]);
            let noise = tape.constant(normal_tensor(rng, b, d, noise_std))?;
            let step = tpc_step(tape, latents[t], Some(noise), unroll.priors[t])?;
            total = tape.add(total, step)?;
        }
        Ok(total)
    }

    /// `Σ_{t≥2}` of the batch-mean log-likelihood of `E(o_t)` under `p(s_t | h_t)`.
    pub fn consistency_term(&self, tape: &mut Tape, latents: &[Var], unroll: &Unroll) -> Result<Var> {
        let mut total = tape.scalar(0.0)?;
        for t in 1..latents.len() {
            let lp = gaussian_log_prob(tape, latents[t], unroll.priors[t])?;
            let m = tape.mean(lp)?;
            total = tape.add(total, m)?;
        }
        Ok(total)
    }

    /// Temporal predictive coding on `B × T` latents and `B × (T−1)` actions
    /// (given per time step).
    pub fn tpc_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latents: &[Var],
        actions: &[Var],
        noise_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        require_negatives(tape.shape(latents[0])[0], "temporal predictive coding")?;
        let unroll = self.unroll(tape, p, latents, actions, None)?;
        self.tpc_term(tape, latents, &unroll, noise_std, rng)
    }

    pub fn consistency_loss(&self, tape: &mut Tape, p: &Bound, latents: &[Var], actions: &[Var]) -> Result<Var> {
        let unroll = self.unroll(tape, p, latents, actions, None)?;
        self.consistency_term(tape, latents, &unroll)
    }

    /// `Σ_t` batch-mean `ln R(r_t | s_t)`; rows of `latents` and `rewards`
    /// are time-major with `batch` rows per step.
    pub fn reward_loss(&self, tape: &mut Tape, p: &Bound, latents: Var, rewards: Var, batch: usize) -> Result<Var> {
        let pred = self.reward(tape, p, latents)?;
        let ll = unit_gaussian_log_likelihood(tape, pred, rewards)?;
        let steps = tape.shape(latents)[0] as f64 / batch as f64;
        tape.scale(ll, steps)
    }

    /// The weighted objective with one shared encoding and one smoothed unroll.
    pub fn objective(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &TrajectoryBatch,
        weights: &LossWeights,
        flags: ObjectiveFlags,
        rng: &mut impl rand::RngCore,
    ) -> Result<ObjectiveGraph> {
        batch.validate(&self.config)?;
        weights.validate()?;
        let (b, t_len) = (batch.batch, batch.length);
        require_negatives(b, "world-model objective")?;

        let obs = tape.constant(batch.obs.clone())?;
        let latents = self.encode(tape, p, obs)?;
        let mut jittered = batch.obs.clone();
        for v in jittered.data_mut() {
            *v += SPC_VIEW_JITTER * rng.sample::<f64, _>(StandardNormal);
        }
        let jittered = tape.constant(jittered)?;
        let views = self.encode(tape, p, jittered)?;

        let actions = tape.constant(batch.actions.clone())?;
        let mut per_t = Vec::with_capacity(t_len);
        let mut views_t = Vec::with_capacity(t_len);
        let mut actions_t = Vec::with_capacity(t_len);
        for t in 0..t_len {
            per_t.push(tape.slice_rows(latents, t * b, (t + 1) * b)?);
            views_t.push(tape.slice_rows(views, t * b, (t + 1) * b)?);
            actions_t.push(tape.slice_rows(actions, t * b, (t + 1) * b)?);
        }

        let unroll = if flags.smoothing {
            self.unroll(tape, p, &per_t, &actions_t, Some(&mut *rng))?
        } else {
            self.unroll(tape, p, &per_t, &actions_t, None)?
        };
        let tpc = self.tpc_term(tape, &per_t, &unroll, weights.tpc_noise, rng)?;
        let consistency = self.consistency_term(tape, &per_t, &unroll)?;

        let mut spc = tape.scalar(0.0)?;
        for t in 0..t_len {
            let step = spc_bound(tape, per_t[t], views_t[t], weights.spc_sigma)?;
            spc = tape.add(spc, step)?;
        }
        let spc = tape.scale(spc, 1.0 / t_len as f64)?;

        let reward_in = if flags.separate_reward {
            tape.detach(latents)?
        } else {
            latents
        };
        let rewards = tape.constant(batch.rewards.clone())?;
        let reward = self.reward_loss(tape, p, reward_in, rewards, b)?;

        let terms = [
            (tpc, weights.lambda1),
            (consistency, weights.lambda2),
            (spc, weights.lambda3),
            (reward, weights.lambda4),
        ];
        let mut objective = tape.scalar(0.0)?;
        for (term, w) in terms {
            let scaled = tape.scale(term, w)?;
            objective = tape.add(objective, scaled)?;
        }
        Ok(ObjectiveGraph {
            objective,
            tpc,
            consistency,
            spc,
            reward,
            latents,
            unroll,
        })
    }

    /// Evaluates the objective without updating anything.
    pub fn total_loss(
        &self,
        batch: &TrajectoryBatch,
        weights: &LossWeights,
        flags: ObjectiveFlags,
        rng: &mut impl rand::RngCore,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let g = self.objective(&mut tape, &p, batch, weights, flags, rng)?;
        Ok(breakdown(&tape, &g))
    }

    /// One Adam step ascending the objective.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        batch: &TrajectoryBatch,
        weights: &LossWeights,
        flags: ObjectiveFlags,
        rng: &mut impl rand::RngCore,
    ) -> Result<WorldModelStep> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true)?;
        let g = self.objective(&mut tape, &p, batch, weights, flags, rng)?;
        let losses = breakdown(&tape, &g);
        let loss = tape.neg(g.objective)?;
        let grads = tape.backward(loss)?;
        let grads = p.grads(&tape, &grads);
        let grad_norm = opt.step(self.params.tensors_mut(), grads)?;

        let b = batch.batch;
        let mut start_h = Vec::with_capacity(batch.length * b * self.config.recurrent_dim);
        for &h in &g.unroll.h {
            start_h.extend_from_slice(tape.value(h).data());
        }
        let start_h = Tensor::matrix(batch.length * b, self.config.recurrent_dim, start_h)?;
        let start_s = tape.value(g.latents).clone();
        Ok(WorldModelStep {
            losses,
            grad_norm,
            start_h,
            start_s,
        })
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(self.params.tensors(), WORLD_MODEL_LR, DEFAULT_CLIP_NORM)
    }

    /// Encodes a single observation.
    pub fn encode_obs(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.encode_rows(&Tensor::row(obs.flat()))?.into_data())
    }

    /// Encodes `N × obs_dim` rows without recording gradients.
    pub fn encode_rows(&self, rows: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(rows.clone())?;
        let s = self.encode(&mut tape, &p, x)?;
        Ok(tape.value(s).clone())
    }

    /// Advances `state` by one action, returning the next recurrent state.
    pub fn step_state(&self, state: &ModelState, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.config.action_dim || state.s.len() != self.config.latent_dim {
            return shape_err("step_state: action or latent dimension mismatch");
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let h = tape.constant(Tensor::row(&state.h))?;
        let s = tape.constant(Tensor::row(&state.s))?;
        let a = tape.constant(Tensor::row(action))?;
        let h2 = self.rssm_step(&mut tape, &p, h, s, a)?;
        Ok(tape.value(h2).data().to_vec())
    }

    pub fn prior_of(&self, h: &[f64]) -> Result<DiagGaussian> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let hv = tape.constant(Tensor::row(h))?;
        let g = self.prior(&mut tape, &p, hv)?;
        DiagGaussian::new(tape.value(g.mean).data().to_vec(), tape.value(g.log_std).data().to_vec())
    }

    pub fn initial_state(&self) -> ModelState {
        ModelState {
            h: vec![0.0; self.config.recurrent_dim],
            s: vec![0.0; self.config.latent_dim],
        }
    }
}

fn breakdown(tape: &Tape, g: &ObjectiveGraph) -> LossBreakdown {
    LossBreakdown {
        tpc: tape.item(g.tpc),
        consistency: tape.item(g.consistency),
        spc: tape.item(g.spc),
        reward: tape.item(g.reward),
        total: tape.item(g.objective),
        latent_std: latent_std(tape.value(g.latents)),
    }
}

/// Mean over columns of the per-column standard deviation.
pub fn latent_std(latents: &Tensor) -> f64 {
    let (n, d) = (latents.rows(), latents.cols());
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| latents.at(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (latents.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

pub(crate) fn check_state_dims(cfg: &WorldModelConfig, h: &Tensor, s: &Tensor) -> Result<()> {
    if h.cols() != cfg.recurrent_dim || s.cols() != cfg.latent_dim || h.rows() != s.rows() {
        return contract(format!(
            "model states: h {:?}, s {:?} for D_h={}, D_s={}",
            h.shape(),
            s.shape(),
            cfg.recurrent_dim,
            cfg.latent_dim
        ));
    }
    Ok(())
}
