//! Mutual-information oracle on a linear-Gaussian chain.
//!
//! `s_t = A s_{t−1} + ε` with `ε ~ N(0, I)` and `A = a·I`. The temporal
//! bound is evaluated with the true transition density as critic and
//! compared with the closed-form `I(s_t; s_{t−1})`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{contract, Result};
use crate::world_model::objectives::tpc_step;
use crate::world_model::GaussianVars;

/// `I(s_t; s_{t−1})` at stationarity, per coordinate `−½ ln(1 − a²)`.
///
/// The stationary variance is `1 / (1 − a²)`, so the squared correlation
/// between consecutive states is `a² σ² / (a² σ² + 1) = a²`.
pub fn closed_form_mi(a: f64, dim: usize) -> f64 {
    let var = 1.0 / (1.0 - a * a);
    let rho2 = a * a * var / (a * a * var + 1.0);
    -0.5 * dim as f64 * (1.0 - rho2).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiOracleReport {
    pub a: f64,
    pub dim: usize,
    pub batch: usize,
    pub trials: usize,
    pub closed_form_mi: f64,
    pub ln_batch: f64,
    pub estimate: f64,
    pub standard_error: f64,
}

impl MiOracleReport {
    /// `estimate ≤ min(MI, ln B) + 3 SE`.
    pub fn within_bound(&self) -> bool {
        self.estimate <= self.closed_form_mi.min(self.ln_batch) + 3.0 * self.standard_error
    }

    /// Whether the batch is large enough for the estimate to be expected close to MI.
    pub fn batch_is_large(&self) -> bool {
        self.ln_batch >= 2.0 * self.closed_form_mi
    }

    pub fn relative_gap(&self) -> f64 {
        (self.estimate - self.closed_form_mi).abs() / self.closed_form_mi
    }
}

/// Averages the one-step bound over `trials` independent batches of `batch`
/// stationary pairs.
pub fn mi_oracle_check(a: f64, dim: usize, batch: usize, trials: usize, rng: &mut impl Rng) -> Result<MiOracleReport> {
    if !(a.abs() < 1.0) {
        return contract(format!("|a| must be below 1 for stationarity, got {a}"));
    }
    if dim < 1 || batch < 2 || trials < 2 {
        return contract("mi oracle needs dim ≥ 1, batch ≥ 2 and trials ≥ 2");
    }
    let sd = (1.0 / (1.0 - a * a)).sqrt();
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let prev = Tensor::from_fn(batch, dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        let next = Tensor::from_fn(batch, dim, |i, j| a * prev.at(i, j) + rng.sample::<f64, _>(StandardNormal));
        let mean = Tensor::from_fn(batch, dim, |i, j| a * prev.at(i, j));
        let mut tape = Tape::new();
        let future = tape.constant(next)?;
        let prior = GaussianVars {
            mean: tape.constant(mean)?,
            log_std: tape.constant(Tensor::zeros(vec![batch, dim]))?,
        };
        let v = tpc_step(&mut tape, future, None, prior)?;
        values.push(tape.item(v));
    }
    let n = values.len() as f64;
    let estimate = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MiOracleReport {
        a,
        dim,
        batch,
        trials,
        closed_form_mi: closed_form_mi(a, dim),
        ln_batch: (batch as f64).ln(),
        estimate,
        standard_error: (var / n).sqrt(),
    })
}
