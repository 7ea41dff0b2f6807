//! Central finite-difference gradient checking.
//!
//! The check only evaluates forward values, so it stays independent of the
//! backward pass it validates.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors on near-zero gradient entries.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(REL_ERR_FLOOR);
        (self.analytic - self.numeric).abs() / denom
    }
}

pub fn max_rel_err(entries: &[GradCheckEntry]) -> f64 {
    entries.iter().map(GradCheckEntry::rel_err).fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` w.r.t. every entry of every leaf with a
/// central difference of step `h`.
pub fn check_gradients<F>(leaves: &[Tensor], f: F, h: f64) -> Result<Vec<GradCheckEntry>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut entries = Vec::new();
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[li], leaf.shape());
        for k in 0..leaf.numel() {
            let orig = leaf.data()[k];
            work[li].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[li].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[li].data_mut()[k] = orig;
            entries.push(GradCheckEntry {
                leaf: li,
                index: k,
                analytic: analytic.data()[k],
                numeric: (up - down) / (2.0 * h),
            });
        }
    }
    Ok(entries)
}
