//! λ-returns over an imagined horizon.
//!
//! With rewards `r_0..r_{H−1}` and values `v_0..v_H`,
//! `V_λ(τ) = r_τ + γ[(1 − λ) v_{τ+1} + λ V_λ(τ+1)]` and `V_λ(H) = v_H`.

use crate::autodiff::{Tape, Var};
use crate::error::{contract, shape_err, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_LAMBDA: f64 = 0.95;

fn check(h: usize, values: usize, gamma: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return contract(format!("discount must lie in [0, 1], got {gamma}"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return contract(format!("lambda must lie in [0, 1], got {lambda}"));
    }
    if h == 0 {
        return contract("lambda return needs at least one reward");
    }
    if values != h + 1 {
        return shape_err(format!("{h} rewards need {} values, got {values}", h + 1));
    }
    Ok(())
}

/// Returns `V_λ(τ)` for `τ = 0..H−1`.
pub fn lambda_return(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    check(h, values.len(), gamma, lambda)?;
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Tape version over batched columns: every entry of `rewards` and `values`
/// is an `N × 1` variable.
pub fn lambda_return_vars(
    tape: &mut Tape,
    rewards: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>> {
    let h = rewards.len();
    check(h, values.len(), gamma, lambda)?;
    let mut out = Vec::with_capacity(h);
    let mut next = values[h];
    for t in (0..h).rev() {
        let boot = tape.scale(values[t + 1], gamma * (1.0 - lambda))?;
        let carry = tape.scale(next, gamma * lambda)?;
        let tail = tape.add(boot, carry)?;
        next = tape.add(rewards[t], tail)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}
