//! Small pixel control tasks with interchangeable backgrounds.
//!
//! `pendulum_lite` is a torque-limited pendulum to be swung upright
//! (`θ = 0` is up, reward `cos θ`). `pointmass_lite` is a point mass pushed
//! towards a goal on a bounded plane (reward `1 − tanh(4·distance)`). Both are
//! integrated with semi-implicit Euler at `dt = 0.05`.

pub mod background;
pub mod render;

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, shape_err, Error, Result};
use crate::world_model::Observation;
pub use background::{Background, BackgroundSource, Split};

pub const DT: f64 = 0.05;

pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const GRAVITY: f64 = 9.8;
pub const TORQUE_GAIN: f64 = 2.0;
pub const PENDULUM_DAMPING: f64 = 0.05;
pub const MAX_ANGULAR_SPEED: f64 = 8.0;

pub const FORCE_GAIN: f64 = 1.0;
pub const DRAG: f64 = 0.1;
pub const MAX_SPEED: f64 = 2.0;
pub const ARENA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PendulumLite,
    PointmassLite,
}

impl Task {
    pub fn action_dim(self) -> usize {
        match self {
            Self::PendulumLite => 1,
            Self::PointmassLite => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PendulumLite => "pendulum_lite",
            Self::PointmassLite => "pointmass_lite",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum_lite" => Ok(Self::PendulumLite),
            "pointmass_lite" => Ok(Self::PointmassLite),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_action_repeat")]
    pub action_repeat: usize,
    #[serde(default)]
    pub background: BackgroundSource,
    /// Physics steps per episode.
    #[serde(default = "default_episode_length")]
    pub episode_length: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_image_size() -> usize {
    16
}

fn default_action_repeat() -> usize {
    2
}

fn default_episode_length() -> usize {
    1000
}

impl EnvConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            image_size: default_image_size(),
            action_repeat: default_action_repeat(),
            background: BackgroundSource::Clean,
            episode_length: default_episode_length(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_repeat < 1 {
            return Err(Error::Config("action_repeat must be at least 1".into()));
        }
        if self.episode_length == 0 || self.episode_length % self.action_repeat != 0 {
            return Err(Error::Config(format!(
                "episode_length {} must be a positive multiple of action_repeat {}",
                self.episode_length, self.action_repeat
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is below 8", self.image_size)));
        }
        self.background.validate()
    }

    /// Agent decisions per episode.
    pub fn decisions(&self) -> usize {
        self.episode_length / self.action_repeat
    }
}

/// Ground-truth physical state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum PhysicalState {
    Pendulum { theta: f64, omega: f64 },
    PointMass { x: f64, y: f64, vx: f64, vy: f64, goal_x: f64, goal_y: f64 },
}

impl PhysicalState {
    /// Reward of a single physics step ending in this state.
    pub fn reward(&self) -> f64 {
        match *self {
            Self::Pendulum { theta, .. } => theta.cos(),
            Self::PointMass { x, y, goal_x, goal_y, .. } => {
                let d = ((x - goal_x).powi(2) + (y - goal_y).powi(2)).sqrt();
                1.0 - (4.0 * d).tanh()
            }
        }
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self {
            Self::Pendulum { .. } => &["theta", "omega"],
            Self::PointMass { .. } => &["x", "y", "vx", "vy", "goal_x", "goal_y"],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Self::Pendulum { theta, omega } => vec![theta, omega],
            Self::PointMass { x, y, vx, vy, goal_x, goal_y } => vec![x, y, vx, vy, goal_x, goal_y],
        }
    }

    pub fn within_bounds(&self) -> bool {
        match *self {
            Self::Pendulum { theta, omega } => theta > -PI - 1e-12 && theta <= PI + 1e-12 && omega.abs() <= MAX_ANGULAR_SPEED,
            Self::PointMass { x, y, vx, vy, .. } => {
                x.abs() <= ARENA && y.abs() <= ARENA && vx.abs() <= MAX_SPEED && vy.abs() <= MAX_SPEED
            }
        }
    }

    fn integrate(&mut self, u: &[f64]) {
        match self {
            Self::Pendulum { theta, omega } => {
                let inertia = PENDULUM_MASS * PENDULUM_LENGTH * PENDULUM_LENGTH;
                let acc = GRAVITY / PENDULUM_LENGTH * theta.sin() - PENDULUM_DAMPING * *omega + TORQUE_GAIN * u[0] / inertia;
                *omega = (*omega + DT * acc).clamp(-MAX_ANGULAR_SPEED, MAX_ANGULAR_SPEED);
                *theta = wrap_angle(*theta + DT * *omega);
            }
            Self::PointMass { x, y, vx, vy, .. } => {
                for (p, v, f) in [(x, vx, u[0]), (y, vy, u[1])] {
                    *v = (*v + DT * (FORCE_GAIN * f - DRAG * *v)).clamp(-MAX_SPEED, MAX_SPEED);
                    *p += DT * *v;
                    if p.abs() > ARENA {
                        *p = p.clamp(-ARENA, ARENA);
                        *v = 0.0;
                    }
                }
            }
        }
    }

    /// Coverage of the agent sprite.
    pub fn agent_layer(&self, size: usize) -> Vec<f64> {
        match *self {
            Self::Pendulum { theta, .. } => render::pendulum_layer(size, theta),
            Self::PointMass { x, y, .. } => render::pointmass_layer(size, x, y),
        }
    }

    /// Draws the goal marker (if any) and the agent onto `frame`.
    pub fn draw(&self, frame: &mut [f64], size: usize) {
        if let Self::PointMass { goal_x, goal_y, .. } = *self {
            render::composite(frame, &render::goal_layer(size, goal_x, goal_y), render::GOAL_LEVEL);
        }
        render::composite(frame, &self.agent_layer(size), render::AGENT_LEVEL);
    }
}

/// Maps an angle into `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub physical: PhysicalState,
    /// Physics steps taken in this episode.
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: PhysicalState,
}

/// Goal of `pointmass_lite`, fixed by the environment seed so that every
/// episode of one environment (and its evaluation copy) shares it.
pub fn goal_position(env_seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed ^ 0x6f61_6c5f_706f_7321);
    (rng.gen_range(-0.8..=0.8), rng.gen_range(-0.8..=0.8))
}

pub struct Env {
    config: EnvConfig,
    background: Background,
    rng: ChaCha8Rng,
    state: EnvState,
    frame: Vec<f64>,
}

impl Env {
    /// Builds the environment and resets it with `config.seed`.
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let background = Background::new(config.background.clone(), config.image_size)?;
        let seed = config.seed;
        let mut env = Self {
            background,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: EnvState {
                physical: PhysicalState::Pendulum { theta: PI, omega: 0.0 },
                step: 0,
            },
            frame: Vec::new(),
            config,
        };
        env.reset(seed);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn background(&self) -> &Background {
        &self.background
    }

    pub fn action_dim(&self) -> usize {
        self.config.task.action_dim()
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let physical = match self.config.task {
            Task::PendulumLite => PhysicalState::Pendulum {
                theta: wrap_angle(PI + self.rng.gen_range(-0.1..=0.1)),
                omega: 0.0,
            },
            Task::PointmassLite => {
                let (goal_x, goal_y) = goal_position(self.config.seed);
                PhysicalState::PointMass {
                    x: self.rng.gen_range(-0.9..=0.9),
                    y: self.rng.gen_range(-0.9..=0.9),
                    vx: 0.0,
                    vy: 0.0,
                    goal_x,
                    goal_y,
                }
            }
        };
        self.state = EnvState { physical, step: 0 };
        self.background.reset(&mut self.rng);
        self.frame = self.background.frame(0, &mut self.rng);
        self.observation()
    }

    /// Replaces the physical state, keeping the background; used by tests and probes.
    pub fn set_physical(&mut self, physical: PhysicalState) -> Result<()> {
        if std::mem::discriminant(&physical) != std::mem::discriminant(&self.state.physical) {
            return contract("physical state belongs to a different task");
        }
        self.state.physical = physical;
        Ok(())
    }

    /// Current background frame with the agent drawn on top.
    pub fn observation(&self) -> Observation {
        let n = self.config.image_size;
        let mut frame = self.frame.clone();
        self.state.physical.draw(&mut frame, n);
        Observation::new(Tensor::new(vec![1, n, n], frame).expect("frame has n² pixels"))
            .expect("composited pixels stay in range")
    }

    /// Current background frame without the agent.
    pub fn background_frame(&self) -> &[f64] {
        &self.frame
    }

    /// Coverage of the agent sprite in the current observation.
    pub fn agent_mask(&self) -> Vec<f64> {
        self.state.physical.agent_layer(self.config.image_size)
    }

    /// Reward a single physics step in the current state would earn.
    pub fn state_reward(&self) -> f64 {
        self.state.physical.reward()
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.config.episode_length
    }

    /// Applies `action`, clamped to `[−1, 1]`, for `action_repeat` physics steps.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.action_dim() {
            return shape_err(format!("{} expects {} action dims, got {}", self.config.task.name(), self.action_dim(), action.len()));
        }
        if self.done() {
            return contract("step called on a finished episode; reset first");
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Domain("non-finite action".into()));
        }
        let u: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let mut reward = 0.0;
        for _ in 0..self.config.action_repeat {
            self.state.physical.integrate(&u);
            self.state.step += 1;
            self.frame = self.background.frame(self.state.step, &mut self.rng);
            reward += self.state.physical.reward();
        }
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.done(),
            info: self.state.physical,
        })
    }
}

/// Per-decision record of an episode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub t: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    pub state: PhysicalState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub rows: Vec<LogRow>,
}

impl EpisodeLog {
    pub fn push(&mut self, t: usize, action: &[f64], reward: f64, state: PhysicalState) {
        self.rows.push(LogRow {
            t,
            action: action.to_vec(),
            reward,
            state,
        });
    }

    pub fn total_reward(&self) -> f64 {
        self.rows.iter().map(|r| r.reward).sum()
    }

    /// `t,action_0..,reward,<state fields>` with one line per decision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return out;
        };
        out.push('t');
        for i in 0..first.action.len() {
            let _ = write!(out, ",action_{i}");
        }
        out.push_str(",reward");
        for n in first.state.names() {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.t);
            for a in &r.action {
                let _ = write!(out, ",{a}");
            }
            let _ = write!(out, ",{}", r.reward);
            for v in r.state.to_vec() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests;
