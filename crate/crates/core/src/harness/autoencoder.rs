//! Pixel-reconstruction baseline: an encoder of the same shape as the world
//! model's, trained only to reconstruct its input.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::optim::{Adam, DEFAULT_CLIP_NORM, WORLD_MODEL_LR};
use crate::autodiff::{Tape, Tensor};
use crate::error::{contract, shape_err, Result};
use crate::harness::probes::FrozenEncoder;
use crate::harness::replay::ReplayBuffer;
use crate::nn::{Activation, Mlp, ParamSet};
use crate::world_model::WorldModelConfig;

pub struct PixelAutoencoder {
    pub params: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
    obs_dim: usize,
    latent_dim: usize,
    opt: Adam,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AutoencoderStep {
    pub mse: f64,
    pub grad_norm: f64,
}

impl PixelAutoencoder {
    /// Encoder `[P, hid, hid, D_s]` as in the world model, mirrored decoder.
    pub fn new(cfg: &WorldModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (p, hid, d) = (cfg.obs_dim(), cfg.hidden_dim, cfg.latent_dim);
        let mut params = ParamSet::new();
        let encoder = Mlp::new(&mut params, "encoder", &[p, hid, hid, d], Activation::Elu, rng);
        let decoder = Mlp::new(&mut params, "decoder", &[d, hid, hid, p], Activation::Elu, rng);
        let opt = Adam::new(params.tensors(), WORLD_MODEL_LR, DEFAULT_CLIP_NORM);
        Ok(Self {
            params,
            encoder,
            decoder,
            obs_dim: p,
            latent_dim: d,
            opt,
        })
    }

    /// One Adam step on the mean squared reconstruction error of `rows`.
    pub fn train_step(&mut self, rows: &Tensor) -> Result<AutoencoderStep> {
        if rows.cols() != self.obs_dim {
            return shape_err(format!("autoencoder expects {} pixels, got {}", self.obs_dim, rows.cols()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true)?;
        let x = tape.constant(rows.clone())?;
        let z = self.encoder.forward(&mut tape, &bound, x)?;
        let out = self.decoder.forward(&mut tape, &bound, z)?;
        let diff = tape.sub(out, x)?;
        let sq = tape.square(diff)?;
        let loss = tape.mean(sq)?;
        let grads = tape.backward(loss)?;
        let grads = bound.grads(&tape, &grads);
        let grad_norm = self.opt.step(self.params.tensors_mut(), grads)?;
        Ok(AutoencoderStep {
            mse: tape.item(loss),
            grad_norm,
        })
    }

    /// `steps` updates on `B × T` frames sampled from `buffer`, the same
    /// per-update frame count the world model sees.
    pub fn fit(
        &mut self,
        buffer: &ReplayBuffer,
        batch: usize,
        length: usize,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<AutoencoderStep> {
        if steps == 0 {
            return contract("autoencoder fit needs at least one step");
        }
        let mut last = AutoencoderStep::default();
        for _ in 0..steps {
            let b = buffer.sample(batch, length, rng)?;
            last = self.train_step(&b.obs)?;
        }
        Ok(last)
    }
}

impl FrozenEncoder for PixelAutoencoder {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn encode_rows(&self, rows: &Tensor) -> Result<Tensor> {
        if rows.cols() != self.obs_dim {
            return shape_err(format!("autoencoder expects {} pixels, got {}", self.obs_dim, rows.cols()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false)?;
        let x = tape.constant(rows.clone())?;
        let z = self.encoder.forward(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }
}
