//! Define-by-run reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough bookkeeping to propagate
//! gradients; [`Tape::backward`] walks the nodes in reverse.
//!
//! Binary elementwise ops broadcast along any dimension of size 1, so a
//! `1 × n` bias adds onto a `b × n` batch and a `b × 1` column scales one.

use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use crate::error::{contract, shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Elu,
    Softplus,
    Exp,
    Log,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Mean(Var),
    LogSumExpRows(Var),
    Broadcast(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf does not require grad or
    /// is not connected to the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Operation names accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpName {
    Add,
    Sub,
    Mul,
    MatMul,
    Concat,
    Slice,
    Tanh,
    Elu,
    Softplus,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    LogSumExp,
    Broadcast,
}

impl FromStr for OpName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "matmul" => Self::MatMul,
            "concat" => Self::Concat,
            "slice" => Self::Slice,
            "tanh" => Self::Tanh,
            "elu" => Self::Elu,
            "softplus" => Self::Softplus,
            "exp" => Self::Exp,
            "log" => Self::Log,
            "square" => Self::Square,
            "sum" => Self::Sum,
            "mean" => Self::Mean,
            "logsumexp" => Self::LogSumExp,
            "broadcast" => Self::Broadcast,
            other => return contract(format!("unknown op {other:?}")),
        })
    }
}

/// Extra arguments for [`Tape::apply`].
///
/// `axis` selects the dimension for concat/slice/sum (`None` sums
/// everything), `range` is the half-open slice range and `shape` the
/// broadcast target.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub range: Option<(usize, usize)>,
    pub shape: Option<Vec<usize>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    t.require_rank2(what)
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sums `g` (shape `r × c`) down to a broadcast operand of shape `ar × ac`.
fn reduce_to(g: &[f64], r: usize, c: usize, ar: usize, ac: usize, out: &mut [f64], scale: impl Fn(usize) -> f64) {
    if ar == r && ac == c {
        for (k, o) in out.iter_mut().enumerate() {
            *o += g[k] * scale(k);
        }
        return;
    }
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i };
        for j in 0..c {
            let aj = if ac == 1 { 0 } else { j };
            let k = i * c + j;
            out[ai * ac + aj] += g[k] * scale(k);
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64], beta: f64) {
    // SAFETY: callers pass slices whose lengths cover the m×k, k×n and m×n
    // extents described by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// Copies the value of `x` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = dims(self.value(a), "elementwise op")?;
        let (br, bc) = dims(self.value(b), "elementwise op")?;
        let (r, c) = match (broadcast_dim(ar, br), broadcast_dim(ac, bc)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return shape_err(format!(
                    "{kind:?}: cannot broadcast {ar}x{ac} with {br}x{bc}"
                ))
            }
        };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        if ar == br && ac == bc {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                let ai = if ar == 1 { 0 } else { i };
                let bi = if br == 1 { 0 } else { i };
                for j in 0..c {
                    let aj = if ac == 1 { 0 } else { j };
                    let bj = if bc == 1 { 0 } else { j };
                    out.push(f(av[ai * ac + aj], bv[bi * bc + bj]));
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::Binary(kind, a, b),
            rg,
            "elementwise op",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a), "matmul")?;
        let (k2, n) = dims(self.value(b), "matmul")?;
        if k != k2 {
            return shape_err(format!("matmul: {m}x{k} @ {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "transpose")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg, "transpose")
    }

    /// Concatenates along columns (axis 1).
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let (r, _) = dims(self.value(xs[0]), "concat")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xr, xc) = dims(self.value(x), "concat")?;
            if xr != r {
                return shape_err(format!("concat along columns: row counts {r} vs {xr}"));
            }
            widths.push(xc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(xs);
        self.push(Tensor::new(vec![r, c], out)?, Op::ConcatCols(xs.to_vec()), rg, "concat")
    }

    /// Concatenates along rows (axis 0).
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat of zero tensors");
        }
        let (_, c) = dims(self.value(xs[0]), "concat")?;
        let mut r = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (xr, xc) = dims(self.value(x), "concat")?;
            if xc != c {
                return shape_err(format!("concat along rows: column counts {c} vs {xc}"));
            }
            r += xr;
            out.extend_from_slice(self.value(x).data());
        }
        let rg = self.any_grad(xs);
        self.push(Tensor::new(vec![r, c], out)?, Op::ConcatRows(xs.to_vec()), rg, "concat")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x), "slice")?;
        if start >= end || end > c {
            return shape_err(format!("slice columns {start}..{end} of {r}x{c}"));
        }
        let w = end - start;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, w], out)?, Op::SliceCols(x, start), rg, "slice")
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x), "slice")?;
        if start >= end || end > r {
            return shape_err(format!("slice rows {start}..{end} of {r}x{c}"));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![end - start, c], out)?, Op::SliceRows(x, start), rg, "slice")
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xt = self.value(x);
        dims(xt, "unary op")?;
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Elu => |v| if v > 0.0 { v } else { v.exp_m1() },
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Log => {
                if let Some(bad) = xt.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                f64::ln
            }
            Unary::Square => |v| v * v,
            Unary::Neg => |v| -v,
        };
        let out: Vec<f64> = xt.data().iter().map(|&v| f(v)).collect();
        let shape = xt.shape().to_vec();
        let rg = self.any_grad(&[x]);
        let name = match kind {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Elu => "elu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Neg => "neg",
        };
        self.push(Tensor::new(shape, out)?, Op::Unary(kind, x), rg, name)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Elu, x)
    }

    /// `ln(1 + e^x)`, switching to the identity above 20.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().map(|v| v * k).collect();
        let shape = xt.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Scale(x, k), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().map(|v| v + k).collect();
        let shape = xt.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::AddScalar(x), rg, "add_scalar")
    }

    /// Sum of all entries, as a `1 × 1` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "sum")?;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, 1], out)?, Op::SumRows(x), rg, "sum")
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "sum")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![1, c], out)?, Op::SumCols(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Row-wise log-sum-exp with max subtraction: `r × c → r × 1`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "logsumexp")?;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let row = &xv[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, 1], out)?, Op::LogSumExpRows(x), rg, "logsumexp")
    }

    /// Expands size-1 dimensions of `x` to `shape`.
    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x), "broadcast")?;
        if (r != rows && r != 1) || (c != cols && c != 1) {
            return shape_err(format!("broadcast {r}x{c} to {rows}x{cols}"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let xi = if r == 1 { 0 } else { i };
            for j in 0..cols {
                let xj = if c == 1 { 0 } else { j };
                out.push(xv[xi * c + xj]);
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![rows, cols], out)?, Op::Broadcast(x), rg, "broadcast")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xt = self.value(x);
        let out: Vec<f64> = xt.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = xt.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Clamp(x, lo, hi), rg, "clamp")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).reshape(vec![rows, cols])?;
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// String-dispatched entry point over the core op set.
    pub fn apply(&mut self, op: OpName, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return contract(format!("{op:?} takes {n} inputs, got {}", inputs.len()));
            }
            Ok(())
        };
        match op {
            OpName::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpName::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpName::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpName::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpName::Concat => match attrs.axis.unwrap_or(1) {
                0 => self.concat_rows(inputs),
                1 => self.concat_cols(inputs),
                a => shape_err(format!("concat axis {a} out of range")),
            },
            OpName::Slice => {
                arity(1)?;
                let Some((start, end)) = attrs.range else {
                    return contract("slice needs a range");
                };
                match attrs.axis.unwrap_or(1) {
                    0 => self.slice_rows(inputs[0], start, end),
                    1 => self.slice_cols(inputs[0], start, end),
                    a => shape_err(format!("slice axis {a} out of range")),
                }
            }
            OpName::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpName::Elu => {
                arity(1)?;
                self.elu(inputs[0])
            }
            OpName::Softplus => {
                arity(1)?;
                self.softplus(inputs[0])
            }
            OpName::Exp => {
                arity(1)?;
                self.exp(inputs[0])
            }
            OpName::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpName::Square => {
                arity(1)?;
                self.square(inputs[0])
            }
            OpName::Sum => {
                arity(1)?;
                match attrs.axis {
                    None => self.sum(inputs[0]),
                    Some(0) => self.sum_cols(inputs[0]),
                    Some(1) => self.sum_rows(inputs[0]),
                    Some(a) => shape_err(format!("sum axis {a} out of range")),
                }
            }
            OpName::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpName::LogSumExp => {
                arity(1)?;
                self.logsumexp_rows(inputs[0])
            }
            OpName::Broadcast => {
                arity(1)?;
                match attrs.shape.as_deref() {
                    Some(&[r, c]) => self.broadcast(inputs[0], r, c),
                    _ => contract("broadcast needs a rank-2 target shape"),
                }
            }
        }
    }

    /// Reverse pass from a scalar output.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    /// Only leaves keep their gradient in the returned [`Gradients`].
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_node.value.shape()
            ));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (r, c) = (out.rows(), out.cols());
                let at = self.value(a);
                let bt = self.value(b);
                let (ar, ac) = (at.rows(), at.cols());
                let (br, bc) = (bt.rows(), bt.cols());
                let other = |t: &Tensor, k: usize| -> f64 {
                    let (tr, tc) = (t.rows(), t.cols());
                    let (i, j) = (k / c, k % c);
                    let ti = if tr == 1 { 0 } else { i };
                    let tj = if tc == 1 { 0 } else { j };
                    t.data()[ti * tc + tj]
                };
                if let Some(ga) = self.acc(grads, a) {
                    match kind {
                        Binary::Add | Binary::Sub => reduce_to(g, r, c, ar, ac, ga, |_| 1.0),
                        Binary::Mul => reduce_to(g, r, c, ar, ac, ga, |k| other(bt, k)),
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    match kind {
                        Binary::Add => reduce_to(g, r, c, br, bc, gb, |_| 1.0),
                        Binary::Sub => reduce_to(g, r, c, br, bc, gb, |_| -1.0),
                        Binary::Mul => reduce_to(g, r, c, br, bc, gb, |k| other(at, k)),
                    }
                }
            }
            Op::MatMul(a, b) => {
                let at = self.value(a);
                let bt = self.value(b);
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                if let Some(ga) = self.acc(grads, a) {
                    // dA = G · Bᵀ
                    gemm(m, n, k, (g, n as isize, 1), (bt.data(), 1, n as isize), ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    // dB = Aᵀ · G
                    gemm(k, m, n, (at.data(), 1, k as isize), (g, n as isize, 1), gb, 1.0);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(ref xs) => {
                let (r, c) = (out.rows(), out.cols());
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if let Some(gx) = self.acc(grads, x) {
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * w + j] += g[i * c + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(ref xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if let Some(gx) = self.acc(grads, x) {
                        for (dst, src) in gx.iter_mut().zip(&g[offset..offset + len]) {
                            *dst += src;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, w) = (out.rows(), out.cols());
                let c = self.value(x).cols();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, x) {
                    for (dst, src) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(x).data();
                let yv = out.data();
                if let Some(gx) = self.acc(grads, x) {
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Tanh => 1.0 - yv[k] * yv[k],
                            Unary::Sigmoid => yv[k] * (1.0 - yv[k]),
                            Unary::Elu => {
                                if xv[k] > 0.0 {
                                    1.0
                                } else {
                                    yv[k] + 1.0
                                }
                            }
                            Unary::Softplus => sigmoid(xv[k]),
                            Unary::Exp => yv[k],
                            Unary::Log => 1.0 / xv[k],
                            Unary::Square => 2.0 * xv[k],
                            Unary::Neg => -1.0,
                        };
                        gx[k] += g[k] * d;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += v * s;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for (d, v) in gx.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SumRows(x) => {
                let c = self.value(x).cols();
                if let Some(gx) = self.acc(grads, x) {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k / c];
                    }
                }
            }
            Op::SumCols(x) => {
                let c = self.value(x).cols();
                if let Some(gx) = self.acc(grads, x) {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k % c];
                    }
                }
            }
            Op::LogSumExpRows(x) => {
                let xt = self.value(x);
                let c = xt.cols();
                let xv = xt.data();
                let lse = out.data();
                if let Some(gx) = self.acc(grads, x) {
                    for (k, d) in gx.iter_mut().enumerate() {
                        let i = k / c;
                        *d += g[i] * (xv[k] - lse[i]).exp();
                    }
                }
            }
            Op::Broadcast(x) => {
                let (r, c) = (out.rows(), out.cols());
                let xt = self.value(x);
                let (xr, xc) = (xt.rows(), xt.cols());
                if let Some(gx) = self.acc(grads, x) {
                    reduce_to(g, r, c, xr, xc, gx, |_| 1.0);
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for k in 0..g.len() {
                        if xv[k] >= lo && xv[k] <= hi {
                            gx[k] += g[k];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3)).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn logsumexp_of_two_zeros_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 0.0])).unwrap();
        let y = tape.logsumexp_rows(x).unwrap();
        assert!((tape.item(y) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let vals = [0.3, -1.2, 2.0, 0.0];
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&vals)).unwrap();
        let y = tape.logsumexp_rows(x).unwrap();
        let g = tape.backward(y).unwrap();
        let z: f64 = vals.iter().map(|v| v.exp()).sum();
        for (gv, v) in g.get(x).unwrap().data().iter().zip(vals) {
            assert!((gv - v.exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn tanh_gradient_matches_central_difference() {
        let x0 = 0.5;
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(x0)).unwrap();
        let y = tape.tanh(x).unwrap();
        let analytic = tape.backward(y).unwrap().get(x).unwrap().data()[0];
        let h = 1e-5;
        let fd = ((x0 + h).tanh() - (x0 - h).tanh()) / (2.0 * h);
        assert!(((analytic - fd) / fd).abs() < 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0])).unwrap();
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, -2.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softplus_branches_agree_near_threshold() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[19.999, 20.001, -50.0])).unwrap();
        let y = tape.softplus(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 19.999).abs() < 1e-8);
        assert!((v[1] - 20.001).abs() < 1e-8);
        assert!(v[2] > 0.0 && v[2] < 1e-20);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn apply_dispatches_by_name() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        let op: OpName = "slice".parse().unwrap();
        let s = tape
            .apply(op, &[x], &Attrs { axis: Some(1), range: Some((1, 3)), shape: None })
            .unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0]);
        assert!("conv2d".parse::<OpName>().is_err());
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = rand_tensor(&mut rng, 3, 4, -1.5, 1.5);
            let b = rand_tensor(&mut rng, 4, 2, -1.5, 1.5);
            let bias = rand_tensor(&mut rng, 1, 4, -1.0, 1.0);
            let pos = rand_tensor(&mut rng, 3, 4, 0.5, 2.0);
            let leaves = vec![a, b, bias, pos];
            let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
                let ab = tape.matmul(v[0], v[1])?;
                let t = tape.transpose(ab)?;
                let e = tape.elu(t)?;
                let sp = tape.softplus(v[0])?;
                let th = tape.tanh(sp)?;
                let sg = tape.sigmoid(v[0])?;
                let biased = tape.add(th, v[2])?;
                let m = tape.mul(biased, sg)?;
                let lg = tape.log(v[3])?;
                let ex = tape.exp(v[0])?;
                let sq = tape.square(v[0])?;
                let d = tape.sub(lg, ex)?;
                let d = tape.add(d, sq)?;
                let cat = tape.concat_cols(&[m, d])?;
                let sl = tape.slice_cols(cat, 2, 7)?;
                let lse = tape.logsumexp_rows(sl)?;
                let bc = tape.broadcast(lse, 3, 2)?;
                let rows = tape.concat_rows(&[bc, ab])?;
                let half = tape.slice_rows(rows, 1, 5)?;
                let cl = tape.clamp(half, -3.0, 3.0)?;
                let sr = tape.sum_rows(cl)?;
                let sc = tape.sum_cols(e)?;
                let s1 = tape.sum(sr)?;
                let s2 = tape.mean(sc)?;
                let s3 = tape.scale(s2, 0.7)?;
                let s = tape.add(s1, s3)?;
                tape.add_scalar(s, 1.0)
            };
            let report = check_gradients(&leaves, f, 1e-5).unwrap();
            assert!(max_rel_err(&report) < 1e-4, "max rel err {}", max_rel_err(&report));
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
        let x = rand_tensor(&mut rng, 5, 4, -1.0, 1.0);
        let build = |tape: &mut Tape| {
            let wv = tape.param(w.clone()).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let h = tape.matmul(xv, wv).unwrap();
            let t = tape.tanh(h).unwrap();
            let l1 = tape.sum(t).unwrap();
            let s = tape.square(h).unwrap();
            let l2 = tape.mean(s).unwrap();
            (wv, l1, l2)
        };
        let mut tape = Tape::new();
        let (wv, l1, l2) = build(&mut tape);
        let total = tape.add(l1, l2).unwrap();
        let g_total = tape.backward(total).unwrap().get(wv).unwrap().clone();
        let g1 = tape.backward(l1).unwrap().get(wv).unwrap().clone();
        let g2 = tape.backward(l2).unwrap().get(wv).unwrap().clone();
        for k in 0..g_total.numel() {
            let sum = g1.data()[k] + g2.data()[k];
            assert!((g_total.data()[k] - sum).abs() < 1e-12);
        }
    }
}
