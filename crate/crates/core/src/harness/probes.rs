//! Analysis probes on frozen encoders: a linear state probe and a
//! reconstruction decoder with per-region error.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::Adam;
use crate::autodiff::{Tape, Tensor};
use crate::envs::PhysicalState;
use crate::error::{contract, shape_err, Result};
use crate::harness::replay::Episode;
use crate::nn::{Activation, Mlp, ParamSet};
use crate::world_model::{latent_std, WorldModel};

pub const RIDGE_FALLBACK: f64 = 1e-6;
pub const DECODER_STEPS: usize = 2000;
pub const DECODER_HIDDEN: usize = 64;
pub const DECODER_BATCH: usize = 64;
pub const DECODER_LR: f64 = 1e-3;

/// Anything that maps `N × P` pixel rows to `N × D` latents without
/// exposing gradients.
pub trait FrozenEncoder {
    fn latent_dim(&self) -> usize;
    fn encode_rows(&self, rows: &Tensor) -> Result<Tensor>;
}

impl FrozenEncoder for WorldModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode_rows(&self, rows: &Tensor) -> Result<Tensor> {
        WorldModel::encode_rows(self, rows)
    }
}

/// Probe targets for a physical state; angles become `(sin, cos)`.
pub fn probe_targets(state: &PhysicalState) -> (Vec<f64>, &'static [&'static str]) {
    match *state {
        PhysicalState::Pendulum { theta, omega } => (vec![theta.sin(), theta.cos(), omega], &["sin_theta", "cos_theta", "omega"]),
        PhysicalState::PointMass { x, y, vx, vy, .. } => (vec![x, y, vx, vy], &["x", "y", "vx", "vy"]),
    }
}

/// Names of the agent-position targets used for the headline R².
pub fn position_targets(state: &PhysicalState) -> &'static [&'static str] {
    match state {
        PhysicalState::Pendulum { .. } => &["sin_theta", "cos_theta"],
        PhysicalState::PointMass { .. } => &["x", "y"],
    }
}

/// Frames with ground truth, split by episode into fit and held-out rows.
#[derive(Clone, Debug)]
pub struct ProbeDataset {
    pub image_size: usize,
    /// `N × P` observations.
    pub obs: Tensor,
    /// `N × P` agent coverage; a pixel belongs to the agent region iff > 0.
    pub masks: Tensor,
    pub targets: Tensor,
    pub target_names: Vec<String>,
    pub position_names: Vec<String>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl ProbeDataset {
    /// Uses the last `holdout` episodes as the held-out split. With a
    /// single episode the final quarter of its frames is held out.
    pub fn from_episodes(episodes: &[Episode], image_size: usize, holdout: usize) -> Result<Self> {
        if episodes.is_empty() || episodes.iter().any(Episode::is_empty) {
            return contract("probe dataset needs non-empty episodes");
        }
        if episodes.len() > 1 && (holdout == 0 || holdout >= episodes.len()) {
            return contract(format!("holdout {holdout} must be in 1..{}", episodes.len()));
        }
        let p = image_size * image_size;
        let first = &episodes[0].states[0];
        let (_, names) = probe_targets(first);
        let (mut obs, mut masks, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
        let split_at = episodes.len() - holdout.min(episodes.len() - 1);
        let mut row = 0;
        for (e, ep) in episodes.iter().enumerate() {
            let single_cut = (ep.len() * 3) / 4;
            for (t, (o, s)) in ep.obs.iter().zip(&ep.states).enumerate() {
                if o.len() != p {
                    return shape_err(format!("observation has {} pixels, expected {p}", o.len()));
                }
                obs.extend_from_slice(o);
                masks.extend(s.agent_layer(image_size));
                targets.extend(probe_targets(s).0);
                let held = if episodes.len() == 1 { t >= single_cut } else { e >= split_at };
                if held {
                    test_rows.push(row);
                } else {
                    train_rows.push(row);
                }
                row += 1;
            }
        }
        if train_rows.is_empty() || test_rows.is_empty() {
            return contract("probe split left one side empty");
        }
        Ok(Self {
            image_size,
            obs: Tensor::matrix(row, p, obs)?,
            masks: Tensor::matrix(row, p, masks)?,
            targets: Tensor::matrix(row, names.len(), targets)?,
            target_names: names.iter().map(|s| s.to_string()).collect(),
            position_names: position_targets(first).iter().map(|s| s.to_string()).collect(),
            train_rows,
            test_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    /// Variance of the observed pixels outside the agent region on held-out
    /// rows; the error a decoder cannot beat there if the background is
    /// unpredictable.
    pub fn background_variance(&self) -> f64 {
        let mut vals = Vec::new();
        for &i in &self.test_rows {
            for j in 0..self.obs.cols() {
                if self.masks.at(i, j) <= 0.0 {
                    vals.push(self.obs.at(i, j));
                }
            }
        }
        if vals.is_empty() {
            return 0.0;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

pub fn take_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::matrix(idx.len(), c, data).expect("row gather keeps the width")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// Held-out R² per target, with the total sum of squares taken around
    /// the fit-split mean so a constant predictor scores exactly 0.
    pub r2: BTreeMap<String, f64>,
    pub ridge_fallback: bool,
}

/// Ordinary least squares from centred features to centred targets.
///
/// Falls back to a ridge of [`RIDGE_FALLBACK`] when the normal equations are
/// not positive definite.
pub fn fit_ols(x: &Tensor, y: &Tensor) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, bool)> {
    if x.rows() != y.rows() || x.rows() == 0 {
        return shape_err(format!("ols: {} feature rows, {} target rows", x.rows(), y.rows()));
    }
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
    let ym = DMatrix::from_row_slice(y.rows(), y.cols(), y.data());
    let x_mean = column_means(&xm);
    let y_mean = column_means(&ym);
    let xc = centre(&xm, &x_mean);
    let yc = centre(&ym, &y_mean);
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * &yc;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let solved = nalgebra::Cholesky::new(gram.clone()).and_then(|c| {
        let l = c.l();
        let ok = l.diagonal().iter().all(|&d| d * d > 1e-12 * scale);
        ok.then(|| c.solve(&rhs))
    });
    let (beta, ridge) = match solved {
        Some(b) => (b, false),
        None => {
            let d = gram.nrows();
            let reg = gram + DMatrix::identity(d, d) * RIDGE_FALLBACK;
            let c = nalgebra::Cholesky::new(reg).ok_or_else(|| crate::Error::Domain("ridge system is not positive definite".into()))?;
            (c.solve(&rhs), true)
        }
    };
    Ok((beta, x_mean, y_mean, ridge))
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

fn centre(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

/// Linear probe with an explicit feature matrix (one row per dataset row).
pub fn probe_linear_features(features: &Tensor, data: &ProbeDataset) -> Result<LinearProbe> {
    if features.rows() != data.len() {
        return shape_err(format!("{} feature rows for {} dataset rows", features.rows(), data.len()));
    }
    let xf = take_rows(features, &data.train_rows);
    let yf = take_rows(&data.targets, &data.train_rows);
    let (beta, x_mean, y_mean, ridge) = fit_ols(&xf, &yf)?;
    let xt = take_rows(features, &data.test_rows);
    let yt = take_rows(&data.targets, &data.test_rows);
    let xt = centre(&DMatrix::from_row_slice(xt.rows(), xt.cols(), xt.data()), &x_mean);
    let pred = xt * beta;
    let mut r2 = BTreeMap::new();
    for (k, name) in data.target_names.iter().enumerate() {
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..yt.rows() {
            let y = yt.at(i, k);
            ss_res += (y - y_mean[k] - pred[(i, k)]).powi(2);
            ss_tot += (y - y_mean[k]).powi(2);
        }
        let score = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        r2.insert(name.clone(), score);
    }
    Ok(LinearProbe { r2, ridge_fallback: ridge })
}

pub fn probe_linear(encoder: &dyn FrozenEncoder, data: &ProbeDataset) -> Result<LinearProbe> {
    let latents = encoder.encode_rows(&data.obs)?;
    probe_linear_features(&latents, data)
}

/// Errors of a decoder trained on frozen latents, on held-out rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionProbe {
    pub agent_mse: f64,
    pub background_mse: f64,
    pub agent_pixels: usize,
    pub background_pixels: usize,
    pub steps: usize,
    pub final_train_mse: f64,
}

/// Decoder outputs for the first `count` held-out rows, for image grids.
#[derive(Clone, Debug)]
pub struct Reconstructions {
    pub truth: Vec<Vec<f64>>,
    pub reconstruction: Vec<Vec<f64>>,
}

/// Trains `[D, hidden, hidden, P]` on latents of the fit rows for `steps`
/// Adam steps of squared error, then reports per-region error on held-out
/// rows. The encoder only ever sees a constant input tensor.
pub fn probe_reconstruction(
    encoder: &dyn FrozenEncoder,
    data: &ProbeDataset,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<(ReconstructionProbe, Reconstructions)> {
    if steps == 0 {
        return contract("decoder probe needs at least one step");
    }
    let latents = encoder.encode_rows(&data.obs)?;
    let d = latents.cols();
    let p = data.obs.cols();
    let mut params = ParamSet::new();
    let net = Mlp::new(&mut params, "decoder", &[d, DECODER_HIDDEN, DECODER_HIDDEN, p], Activation::Elu, rng);
    let mut opt = Adam::new(params.tensors(), DECODER_LR, f64::INFINITY);
    let n_train = data.train_rows.len();
    let batch = DECODER_BATCH.min(n_train);
    let mut final_train_mse = f64::NAN;
    for _ in 0..steps {
        let pick: Vec<usize> = sample_indices(rng, n_train, batch).into_iter().map(|i| data.train_rows[i]).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true)?;
        let z = tape.constant(take_rows(&latents, &pick))?;
        let target = tape.constant(take_rows(&data.obs, &pick))?;
        let out = net.forward(&mut tape, &bound, z)?;
        let diff = tape.sub(out, target)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        final_train_mse = tape.item(loss);
        let grads = tape.backward(loss)?;
        let grads = bound.grads(&tape, &grads);
        opt.step(params.tensors_mut(), grads)?;
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let z = tape.constant(take_rows(&latents, &data.test_rows))?;
    let out = net.forward(&mut tape, &bound, z)?;
    let recon = tape.value(out);
    let (mut agent, mut background) = ((0.0, 0usize), (0.0, 0usize));
    for (k, &i) in data.test_rows.iter().enumerate() {
        for j in 0..p {
            let err = (recon.at(k, j) - data.obs.at(i, j)).powi(2);
            let slot = if data.masks.at(i, j) > 0.0 { &mut agent } else { &mut background };
            slot.0 += err;
            slot.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    let count = data.test_rows.len().min(8);
    let images = Reconstructions {
        truth: data.test_rows[..count].iter().map(|&i| data.obs.row_vec(i)).collect(),
        reconstruction: (0..count).map(|k| recon.row_vec(k)).collect(),
    };
    Ok((
        ReconstructionProbe {
            agent_mse: mean(agent),
            background_mse: mean(background),
            agent_pixels: agent.1,
            background_pixels: background.1,
            steps,
            final_train_mse,
        },
        images,
    ))
}

/// Everything the probe command reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub agent_mse: f64,
    pub background_mse: f64,
    /// Pixel variance outside the agent region on held-out frames.
    pub background_variance: f64,
    pub agent_pixels: usize,
    pub background_pixels: usize,
    pub decoder_steps: usize,
    pub r2: BTreeMap<String, f64>,
    /// Smallest R² over the agent-position targets.
    pub position_r2: f64,
    pub ridge_fallback: bool,
    pub latent_std: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

pub fn run_probes(
    encoder: &dyn FrozenEncoder,
    data: &ProbeDataset,
    decoder_steps: usize,
    rng: &mut impl Rng,
) -> Result<(ProbeReport, Reconstructions)> {
    let linear = probe_linear(encoder, data)?;
    let (rec, images) = probe_reconstruction(encoder, data, decoder_steps, rng)?;
    let latents = encoder.encode_rows(&data.obs)?;
    let position_r2 = data
        .position_names
        .iter()
        .map(|n| linear.r2[n])
        .fold(f64::INFINITY, f64::min);
    Ok((
        ProbeReport {
            agent_mse: rec.agent_mse,
            background_mse: rec.background_mse,
            background_variance: data.background_variance(),
            agent_pixels: rec.agent_pixels,
            background_pixels: rec.background_pixels,
            decoder_steps: rec.steps,
            r2: linear.r2,
            position_r2,
            ridge_fallback: linear.ridge_fallback,
            latent_std: latent_std(&latents),
            train_rows: data.train_rows.len(),
            test_rows: data.test_rows.len(),
        },
        images,
    ))
}
