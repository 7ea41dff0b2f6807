//! Score matrices and the contrastive / likelihood objectives built on them.
//!
//! All objectives are returned as quantities to *maximize*.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, shape_err, Result};

/// Diagonal Gaussian living on a tape: `mean` and clamped `log_std`, both `N × D`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

/// `ln N(x_i; μ_i, σ_i)` per row, returned as `N × 1`.
pub fn gaussian_log_prob(tape: &mut Tape, x: Var, dist: GaussianVars) -> Result<Var> {
    let d = tape.shape(x)[1] as f64;
    let diff = tape.sub(x, dist.mean)?;
    let neg_ls = tape.neg(dist.log_std)?;
    let inv_std = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z)?;
    let half = tape.scale(z2, -0.5)?;
    let per_dim = tape.sub(half, dist.log_std)?;
    let total = tape.sum_rows(per_dim)?;
    tape.add_scalar(total, -0.5 * d * (2.0 * PI).ln())
}

/// Pairwise score matrix `M[i][j] = ln N(x_i; μ_j, σ_j)` (`B × B`).
///
/// Expanded as `−½ x²·wᵀ + x·(μ∘w)ᵀ − ½ Σ μ²w − Σ ln σ − D/2 ln 2π` with
/// `w = exp(−2 ln σ)`, so the whole matrix costs three matmuls.
pub fn pairwise_log_density(tape: &mut Tape, x: Var, dist: GaussianVars) -> Result<Var> {
    let (b, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    if tape.shape(dist.mean) != [b, d] || tape.shape(dist.log_std) != [b, d] {
        return shape_err(format!(
            "pairwise density: x is {b}x{d}, mean {:?}, log_std {:?}",
            tape.shape(dist.mean),
            tape.shape(dist.log_std)
        ));
    }
    let m2 = tape.scale(dist.log_std, -2.0)?;
    let w = tape.exp(m2)?;
    let wt = tape.transpose(w)?;
    let x2 = tape.square(x)?;
    let quad = tape.matmul(x2, wt)?;
    let quad = tape.scale(quad, -0.5)?;
    let mw = tape.mul(dist.mean, w)?;
    let mwt = tape.transpose(mw)?;
    let cross = tape.matmul(x, mwt)?;
    let mu2 = tape.square(dist.mean)?;
    let mu2w = tape.mul(mu2, w)?;
    let c1 = tape.sum_rows(mu2w)?;
    let c1 = tape.scale(c1, -0.5)?;
    let c2 = tape.sum_rows(dist.log_std)?;
    let col = tape.sub(c1, c2)?;
    let row = tape.transpose(col)?;
    let s = tape.add(quad, cross)?;
    let s = tape.add(s, row)?;
    tape.add_scalar(s, -0.5 * d as f64 * (2.0 * PI).ln())
}

/// Fixed-variance critic `M[i][j] = −‖a_i − b_j‖² / (2σ²)` (`B × B`).
pub fn fixed_variance_scores(tape: &mut Tape, a: Var, b: Var, sigma: f64) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return shape_err(format!(
            "fixed-variance scores: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    let a2 = tape.square(a)?;
    let a2 = tape.sum_rows(a2)?;
    let b2 = tape.square(b)?;
    let b2 = tape.sum_rows(b2)?;
    let b2t = tape.transpose(b2)?;
    let bt = tape.transpose(b)?;
    let cross = tape.matmul(a, bt)?;
    let cross = tape.scale(cross, 2.0)?;
    let d2 = tape.sub(cross, a2)?;
    let d2 = tape.sub(d2, b2t)?;
    tape.scale(d2, 1.0 / (2.0 * sigma * sigma))
}

/// InfoNCE bound of a `K × K` score matrix with positives on the diagonal:
/// `mean_i [M_ii − logsumexp_j M_ij] + ln K`, which never exceeds `ln K`.
pub fn info_nce(tape: &mut Tape, scores: Var) -> Result<Var> {
    let (r, c) = (tape.shape(scores)[0], tape.shape(scores)[1]);
    if r != c {
        return shape_err(format!("InfoNCE needs a square score matrix, got {r}x{c}"));
    }
    let eye = tape.constant(Tensor::identity(r))?;
    let masked = tape.mul(scores, eye)?;
    let diag = tape.sum_rows(masked)?;
    let lse = tape.logsumexp_rows(scores)?;
    let gap = tape.sub(diag, lse)?;
    let m = tape.mean(gap)?;
    tape.add_scalar(m, (r as f64).ln())
}

/// InfoNCE bound evaluated directly on a score matrix, without a tape.
pub fn info_nce_value(scores: &Tensor) -> Result<f64> {
    let (r, c) = scores.require_rank2("InfoNCE")?;
    if r != c {
        return shape_err(format!("InfoNCE needs a square score matrix, got {r}x{c}"));
    }
    let mut total = 0.0;
    for i in 0..r {
        let row = &scores.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += row[i] - lse;
    }
    Ok(total / r as f64 + (r as f64).ln())
}

pub(crate) fn require_negatives(batch: usize, what: &str) -> Result<()> {
    if batch < 2 {
        return contract(format!("{what} needs batch size >= 2 for negatives, got {batch}"));
    }
    Ok(())
}

/// Temporal predictive coding term for one time step: the future latents
/// (plus fixed noise) are scored against every row's dynamics prediction.
pub fn tpc_step(tape: &mut Tape, future: Var, noise: Option<Var>, prior: GaussianVars) -> Result<Var> {
    require_negatives(tape.shape(future)[0], "temporal predictive coding")?;
    let x = match noise {
        Some(n) => tape.add(future, n)?,
        None => future,
    };
    let scores = pairwise_log_density(tape, x, prior)?;
    info_nce(tape, scores)
}

/// Static predictive coding: InfoNCE with a fixed-variance Gaussian critic
/// between two views of the same observations.
pub fn spc_loss(tape: &mut Tape, clean: Var, view: Var, sigma: f64) -> Result<Var> {
    require_negatives(tape.shape(clean)[0], "static predictive coding")?;
    let scores = fixed_variance_scores(tape, clean, view, sigma)?;
    info_nce(tape, scores)
}

/// Mean over rows of `ln N(r; mean, 1)`.
pub fn unit_gaussian_log_likelihood(tape: &mut Tape, predicted: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(predicted, target)?;
    let sq = tape.square(diff)?;
    let per_row = tape.sum_rows(sq)?;
    let m = tape.mean(per_row)?;
    let m = tape.scale(m, -0.5)?;
    tape.add_scalar(m, -0.5 * (2.0 * PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn info_nce_on_diagonal_score_matrix() {
        let scores = Tensor::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.0 });
        let e2 = 2f64.exp();
        // direct evaluation of the log-ratio: ln(e² / ((e² + 2) / 3))
        let expected = (3.0 * e2 / (e2 + 2.0)).ln();
        assert!((info_nce_value(&scores).unwrap() - expected).abs() < 1e-12);
        let mut tape = Tape::new();
        let s = tape.constant(scores).unwrap();
        let v = info_nce(&mut tape, s).unwrap();
        assert!((tape.item(v) - expected).abs() < 1e-12);
    }

    #[test]
    fn single_sample_bound_is_zero() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::scalar(3.7)).unwrap();
        let v = info_nce(&mut tape, s).unwrap();
        assert_eq!(tape.item(v), 0.0);
    }

    #[test]
    fn collapsed_latents_give_zero_spc() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(vec![5, 3], 0.4)).unwrap();
        let v = spc_loss(&mut tape, a, a, 0.2).unwrap();
        assert!(tape.item(v).abs() < 1e-12);
    }

    #[test]
    fn two_point_spc_matches_closed_form() {
        for d in [0.05, 0.2, 0.5, 1.3] {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::matrix(2, 1, vec![0.0, d]).unwrap()).unwrap();
            let v = spc_loss(&mut tape, a, a, 0.2).unwrap();
            let expected = 2f64.ln() - (1.0 + (-d * d / 0.08).exp()).ln();
            assert!((tape.item(v) - expected).abs() < 1e-12, "d={d}");
        }
    }

    #[test]
    fn spc_and_tpc_reject_single_row() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 3])).unwrap();
        assert!(spc_loss(&mut tape, a, a, 0.2).is_err());
        let g = GaussianVars { mean: a, log_std: a };
        assert!(tpc_step(&mut tape, a, None, g).is_err());
    }

    #[test]
    fn pairwise_matrix_matches_row_log_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let mk = |rng: &mut ChaCha8Rng| Tensor::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let x = tape.constant(mk(&mut rng)).unwrap();
        let mean = tape.constant(mk(&mut rng)).unwrap();
        let log_std = tape.constant(mk(&mut rng)).unwrap();
        let g = GaussianVars { mean, log_std };
        let m = pairwise_log_density(&mut tape, x, g).unwrap();
        for j in 0..4 {
            let mj = tape.slice_rows(mean, j, j + 1).unwrap();
            let lj = tape.slice_rows(log_std, j, j + 1).unwrap();
            let mb = tape.broadcast(mj, 4, 3).unwrap();
            let lb = tape.broadcast(lj, 4, 3).unwrap();
            let col = gaussian_log_prob(&mut tape, x, GaussianVars { mean: mb, log_std: lb }).unwrap();
            for i in 0..4 {
                let a = tape.value(m).at(i, j);
                let b = tape.value(col).at(i, 0);
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log_prob_at_mean() {
        let ls = [-0.3, 0.1, -5.0];
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::row(&[0.2, -1.0, 3.0])).unwrap();
        let log_std = tape.constant(Tensor::row(&ls)).unwrap();
        let lp = gaussian_log_prob(&mut tape, mean, GaussianVars { mean, log_std }).unwrap();
        let expected = -ls.iter().sum::<f64>() - 1.5 * (2.0 * PI).ln();
        assert!((tape.item(lp) - expected).abs() < 1e-12);
    }

    #[test]
    fn reward_likelihood_at_truth() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let ll = unit_gaussian_log_likelihood(&mut tape, r, r).unwrap();
        assert!((tape.item(ll) + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn pairwise_scores_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let leaves: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let report = check_gradients(
            &leaves,
            |tape, v| {
                let s = tpc_step(tape, v[0], None, GaussianVars { mean: v[1], log_std: v[2] })?;
                let f = fixed_variance_scores(tape, v[0], v[1], 0.7)?;
                let f = info_nce(tape, f)?;
                tape.add(s, f)
            },
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&report) < 1e-4);
    }
}
