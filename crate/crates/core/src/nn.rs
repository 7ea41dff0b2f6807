//! Named parameter storage and the dense building blocks used by every model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return shape_err("parameter sets differ in layout");
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return shape_err(format!("shape {:?} vs {:?}", dst.shape(), src.shape()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Like [`bind`](Self::bind) but marks only parameters whose name starts
    /// with one of `prefixes` as trainable.
    pub fn bind_prefixes(&self, tape: &mut Tape, prefixes: &[&str]) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .zip(&self.names)
            .map(|(t, n)| tape.leaf(t.clone(), prefixes.iter().any(|p| n.starts_with(p))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }
}

/// A [`ParamSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// One gradient per parameter, zero-filled where none flowed.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Elu => tape.elu(x),
            Self::Tanh => tape.tanh(x),
            Self::Identity => Ok(x),
        }
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..limit))
}

/// Affine layer `x · W + b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = params.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let bias = params.add(format!("{name}.b"), Tensor::zeros(vec![1, fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let cols = tape.shape(x)[1];
        if cols != self.fan_in {
            return shape_err(format!("dense layer expects {} inputs, got {cols}", self.fan_in));
        }
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add(y, p.var(self.bias))
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).data_mut().fill(0.0);
        params.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Stack of dense layers with a shared hidden activation and a linear output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if i < last {
                x = self.activation.apply(tape, x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn output_layer(&self) -> &Dense {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// Gated recurrent unit.
///
/// `r = σ(x Wr + h Ur)`, `z = σ(x Wz + h Uz)`, `n = tanh(x Wn + r ∘ (h Un))`,
/// `h' = n + z ∘ (h − n)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Dense,
    pub recurrent: Dense,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Dense::new(params, &format!("{name}.x"), input, 3 * hidden, rng),
            recurrent: Dense::new(params, &format!("{name}.h"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let gx = self.input.forward(tape, p, x)?;
        let gh = self.recurrent.forward(tape, p, h)?;
        let rz_x = tape.slice_cols(gx, 0, 2 * n)?;
        let rz_h = tape.slice_cols(gh, 0, 2 * n)?;
        let rz = tape.add(rz_x, rz_h)?;
        let rz = tape.sigmoid(rz)?;
        let r = tape.slice_cols(rz, 0, n)?;
        let z = tape.slice_cols(rz, n, 2 * n)?;
        let nx = tape.slice_cols(gx, 2 * n, 3 * n)?;
        let nh = tape.slice_cols(gh, 2 * n, 3 * n)?;
        let gated = tape.mul(r, nh)?;
        let cand = tape.add(nx, gated)?;
        let cand = tape.tanh(cand)?;
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(z, diff)?;
        tape.add(cand, keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_layer_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "net", &[4, 6, 5, 2], Activation::Elu, &mut rng);
        let x = Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let leaves = params.tensors().to_vec();
        let report = check_gradients(
            &leaves,
            |tape, vars| {
                let p = Bound { vars: vars.to_vec() };
                let xv = tape.constant(x.clone())?;
                let y = mlp.forward(tape, &p, xv)?;
                let t = tape.tanh(y)?;
                tape.sum(t)
            },
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&report) < 1e-4);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let gru = GruCell::new(&mut params, "gru", 3, 4, &mut rng);
        let mut leaves = params.tensors().to_vec();
        leaves.push(Tensor::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0)));
        leaves.push(Tensor::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0)));
        let np = params.len();
        let report = check_gradients(
            &leaves,
            |tape, vars| {
                let p = Bound { vars: vars[..np].to_vec() };
                let h1 = gru.forward(tape, &p, vars[np], vars[np + 1])?;
                let h2 = gru.forward(tape, &p, vars[np], h1)?;
                let s = tape.square(h2)?;
                tape.sum(s)
            },
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&report) < 1e-4);
    }

    #[test]
    fn copy_from_requires_same_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamSet::new();
        Dense::new(&mut a, "x", 2, 3, &mut rng);
        let mut b = a.clone();
        b.tensors_mut()[0].data_mut().fill(1.0);
        a.copy_from(&b).unwrap();
        assert_eq!(a, b);
        let mut c = ParamSet::new();
        Dense::new(&mut c, "y", 2, 3, &mut rng);
        assert!(a.copy_from(&c).is_err());
    }
}
