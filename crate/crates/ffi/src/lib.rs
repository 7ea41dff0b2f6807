//! C ABI over `tpc-core`.
//!
//! Environments and trained agents are exposed as opaque handles. Every
//! function returns a `TpcStatus`; on failure the message is kept per thread
//! and can be copied out with [`tpc_last_error`]. Panics are caught at the
//! boundary and reported as `TPC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpc_core::agent::Agent;
use tpc_core::autodiff::Tensor;
use tpc_core::behavior::returns::lambda_return;
use tpc_core::checkpoint::Checkpoint;
use tpc_core::envs::{Env, EnvConfig, Task};
use tpc_core::world_model::{ModelState, Observation};
use tpc_core::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Contract = 5,
    NonFinite = 6,
    Config = 7,
    Checkpoint = 8,
    Load = 9,
    Io = 10,
    Panic = 11,
}

impl From<&Error> for TpcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) => Self::Shape,
            Error::Domain(_) => Self::Domain,
            Error::Contract(_) => Self::Contract,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Config(_) => Self::Config,
            Error::Checkpoint(_) => Self::Checkpoint,
            Error::Load(_) => Self::Load,
            Error::Io(_) | Error::Json(_) => Self::Io,
        }
    }
}

/// Opaque environment handle.
pub struct TpcEnv {
    env: Env,
}

/// Opaque agent handle: a restored agent plus its filtering state.
pub struct TpcAgent {
    agent: Agent,
    checkpoint_config: tpc_core::harness::TrainConfig,
    state: Option<ModelState>,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(TpcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(TpcStatus::from(&e), e.to_string())
    }
}

fn fail<T>(status: TpcStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TpcStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (TpcStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (TpcStatus::Panic, m)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    match p.as_mut() {
        Some(r) => Ok(r),
        None => fail(TpcStatus::NullPointer, format!("{what} is null")),
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(TpcStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(TpcStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return fail(TpcStatus::NullPointer, format!("{what} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(s.to_owned()),
        Err(_) => fail(TpcStatus::InvalidArgument, format!("{what} is not UTF-8")),
    }
}

fn copy_into(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return fail(
            TpcStatus::Shape,
            format!("{what} buffer holds {} values, {} required", dst.len(), src.len()),
        );
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn observation(pixels: &[f64], size: usize) -> Result<Observation, Failure> {
    if pixels.len() != size * size {
        return fail(
            TpcStatus::Shape,
            format!("observation has {} pixels, {} required", pixels.len(), size * size),
        );
    }
    Ok(Observation::new(Tensor::new(vec![1, size, size], pixels.to_vec())?)?)
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len − 1` bytes. Returns the full
/// message length in bytes (excluding the terminator).
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tpc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates an environment with a clean background.
///
/// `task` is `"pendulum_lite"` or `"pointmass_lite"`; `episode_length` counts
/// physics steps and must be a multiple of `action_repeat`.
///
/// # Safety
/// `task` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tpc_env_new(
    task: *const c_char,
    image_size: usize,
    action_repeat: usize,
    episode_length: usize,
    out: *mut *mut TpcEnv,
) -> TpcStatus {
    guard(|| {
        if out.is_null() {
            return fail(TpcStatus::NullPointer, "out is null");
        }
        let task: Task = string(task, "task")?.parse()?;
        let cfg = EnvConfig {
            image_size,
            action_repeat,
            episode_length,
            ..EnvConfig::new(task)
        };
        let env = Env::new(cfg)?;
        *out = Box::into_raw(Box::new(TpcEnv { env }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`tpc_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tpc_env_free(env: *mut TpcEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Number of pixels in one observation.
///
/// # Safety
/// `env` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tpc_env_obs_len(env: *const TpcEnv, out: *mut usize) -> TpcStatus {
    guard(|| {
        let env = handle(env as *mut TpcEnv, "env")?;
        *handle(out, "out")? = env.env.config().image_size.pow(2);
        Ok(())
    })
}

/// # Safety
/// `env` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tpc_env_action_dim(env: *const TpcEnv, out: *mut usize) -> TpcStatus {
    guard(|| {
        let env = handle(env as *mut TpcEnv, "env")?;
        *handle(out, "out")? = env.env.action_dim();
        Ok(())
    })
}

/// Starts an episode and writes the first observation.
///
/// # Safety
/// `env` must be a live handle; `obs` valid for `obs_len` writes.
#[no_mangle]
pub unsafe extern "C" fn tpc_env_reset(env: *mut TpcEnv, seed: u64, obs: *mut f64, obs_len: usize) -> TpcStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let dst = slice_mut(obs, obs_len, "obs")?;
        let o = env.env.reset(seed);
        copy_into(dst, o.flat(), "obs")
    })
}

/// Applies `action` (clamped to `[−1, 1]`) and writes the next observation,
/// the summed reward and whether the episode ended.
///
/// # Safety
/// `env` must be a live handle; `action` valid for `action_len` reads, `obs`
/// for `obs_len` writes, `reward` and `done` for one write each.
#[no_mangle]
pub unsafe extern "C" fn tpc_env_step(
    env: *mut TpcEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> TpcStatus {
    guard(|| {
        let env = handle(env, "env")?;
        let a = slice(action, action_len, "action")?;
        let dst = slice_mut(obs, obs_len, "obs")?;
        let reward = handle(reward, "reward")?;
        let done = handle(done, "done")?;
        if env.env.done() {
            return fail(TpcStatus::Contract, "episode is over; call tpc_env_reset");
        }
        let r = env.env.step(a)?;
        copy_into(dst, r.obs.flat(), "obs")?;
        *reward = r.reward;
        *done = r.done;
        Ok(())
    })
}

/// Restores an agent from a JSON checkpoint written by `tpc train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tpc_agent_load(path: *const c_char, out: *mut *mut TpcAgent) -> TpcStatus {
    guard(|| {
        if out.is_null() {
            return fail(TpcStatus::NullPointer, "out is null");
        }
        let path = string(path, "path")?;
        let ck = Checkpoint::load(Path::new(&path))?;
        let agent = ck.restore()?;
        *out = Box::into_raw(Box::new(TpcAgent {
            agent,
            checkpoint_config: ck.config,
            state: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }));
        Ok(())
    })
}

/// # Safety
/// `agent` must be null or a handle from [`tpc_agent_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tpc_agent_free(agent: *mut TpcAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Fails with `TPC_STATUS_CHECKPOINT` unless `env` renders images and takes
/// actions of the sizes the agent was trained on.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn tpc_agent_check_env(agent: *const TpcAgent, env: *const TpcEnv) -> TpcStatus {
    guard(|| {
        let agent = handle(agent as *mut TpcAgent, "agent")?;
        let env = handle(env as *mut TpcEnv, "env")?;
        let ck = Checkpoint {
            format_version: tpc_core::checkpoint::FORMAT_VERSION,
            config: agent.checkpoint_config.clone(),
            counters: Default::default(),
            tensors: Default::default(),
        };
        Ok(ck.check_env(env.env.config())?)
    })
}

fn image_size(agent: &TpcAgent) -> usize {
    agent.checkpoint_config.world_model_config().image_size
}

/// Begins an episode from its first observation.
///
/// # Safety
/// `agent` must be a live handle; `obs` valid for `obs_len` reads.
#[no_mangle]
pub unsafe extern "C" fn tpc_agent_reset(agent: *mut TpcAgent, obs: *const f64, obs_len: usize) -> TpcStatus {
    guard(|| {
        let agent = handle(agent, "agent")?;
        let o = observation(slice(obs, obs_len, "obs")?, image_size(agent))?;
        let mut st = agent.agent.initial_state();
        agent.agent.observe(&mut st, &o)?;
        agent.state = Some(st);
        Ok(())
    })
}

/// Writes the policy's action for the current state. `noise_std` adds
/// Gaussian exploration noise (0 gives the mode action).
///
/// # Safety
/// `agent` must be a live handle; `action` valid for `action_len` writes.
#[no_mangle]
pub unsafe extern "C" fn tpc_agent_act(
    agent: *mut TpcAgent,
    noise_std: f64,
    action: *mut f64,
    action_len: usize,
) -> TpcStatus {
    guard(|| {
        let agent = handle(agent, "agent")?;
        let dst = slice_mut(action, action_len, "action")?;
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return fail(TpcStatus::InvalidArgument, format!("noise_std must be finite and ≥ 0, got {noise_std}"));
        }
        let Some(st) = agent.state.as_ref() else {
            return fail(TpcStatus::Contract, "call tpc_agent_reset before tpc_agent_act");
        };
        let a = agent.agent.act(st, noise_std, &mut agent.rng)?;
        copy_into(dst, &a, "action")
    })
}

/// Feeds back the action that was taken and the observation that followed.
///
/// # Safety
/// `agent` must be a live handle; `action` valid for `action_len` reads and
/// `obs` for `obs_len` reads.
#[no_mangle]
pub unsafe extern "C" fn tpc_agent_observe(
    agent: *mut TpcAgent,
    action: *const f64,
    action_len: usize,
    obs: *const f64,
    obs_len: usize,
) -> TpcStatus {
    guard(|| {
        let agent = handle(agent, "agent")?;
        let a = slice(action, action_len, "action")?;
        if a.len() != agent.agent.action_dim() {
            return fail(
                TpcStatus::Shape,
                format!("action has {} values, {} required", a.len(), agent.agent.action_dim()),
            );
        }
        let o = observation(slice(obs, obs_len, "obs")?, image_size(agent))?;
        let Some(mut st) = agent.state.take() else {
            return fail(TpcStatus::Contract, "call tpc_agent_reset before tpc_agent_observe");
        };
        agent.agent.advance(&mut st, a)?;
        agent.agent.observe(&mut st, &o)?;
        agent.state = Some(st);
        Ok(())
    })
}

/// λ-returns `V_λ(τ)` for `τ = 0..horizon` from `horizon` rewards and
/// `horizon + 1` values (the last one bootstraps).
///
/// # Safety
/// `rewards` and `out` must be valid for `horizon` elements, `values` for
/// `horizon + 1`.
#[no_mangle]
pub unsafe extern "C" fn tpc_lambda_return(
    rewards: *const f64,
    values: *const f64,
    horizon: usize,
    gamma: f64,
    lambda: f64,
    out: *mut f64,
) -> TpcStatus {
    guard(|| {
        let r = slice(rewards, horizon, "rewards")?;
        let v = slice(values, horizon + 1, "values")?;
        let dst = slice_mut(out, horizon, "out")?;
        let ret = lambda_return(r, v, gamma, lambda)?;
        copy_into(dst, &ret, "out")
    })
}
