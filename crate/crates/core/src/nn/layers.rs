//! Layers built from tape kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

use super::params::{Bound, ParamId, ParameterSet};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

pub fn activate<F: Real>(tape: &mut Tape<F>, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Fully connected layer `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = ps.add(&format!("{name}.w"), uniform(rng, &[input, output], bound))?;
        let b = ps.add(&format!("{name}.b"), uniform(rng, &[output], bound))?;
        Ok(Self { w, b, input, output })
    }

    /// Xavier-uniform weights and zero bias, as used for attention projections.
    pub fn xavier<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = ps.add(&format!("{name}.w"), uniform(rng, &[input, output], bound))?;
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Self { w, b, input, output })
    }

    /// [`Dense::xavier`] with the bias held at zero.
    pub fn xavier_unbiased<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = ps.add(&format!("{name}.w"), uniform(rng, &[input, output], bound))?;
        let b = ps.add_buffer(&format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input {
            return Err(shape(
                "dense",
                format!("expected {} features, got {:?}", self.input, tape.value(x).shape()),
            ));
        }
        let h = tape.matmul(x, p.var(self.w))?;
        tape.add_bias(h, p.var(self.b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(ps: &mut ParameterSet<F>, name: &str, dim: usize) -> Result<Self> {
        let scale = ps.add(&format!("{name}.scale"), Tensor::full(&[dim], F::one()))?;
        let shift = ps.add(&format!("{name}.shift"), Tensor::zeros(&[dim]))?;
        Ok(Self { scale, shift })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.scale), p.var(self.shift), LAYER_NORM_EPS)
    }
}

/// Sinusoidal position table of shape `[seq_len, dim]`.
pub fn positional_encoding<F: Real>(seq_len: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(seq_len * dim);
    for pos in 0..seq_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(seq_len.max(1), dim.max(1), data).expect("shape")
}

/// Multi-head self-attention with input and output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub out: Dense,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(shape("attention", format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Dense::xavier(ps, &format!("{name}.q"), dim, dim, rng)?,
            key: Dense::xavier_unbiased(ps, &format!("{name}.k"), dim, dim, rng)?,
            value: Dense::xavier(ps, &format!("{name}.v"), dim, dim, rng)?,
            out: Dense::xavier(ps, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x` holds sequences of `seq_len` consecutive rows.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let a = tape.attention(q, k, v, self.heads, seq_len)?;
        self.out.forward(tape, p, a)
    }
}

/// Pre-norm transformer encoder layer with a 4x GELU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

pub const FF_EXPANSION: usize = 4;

impl TransformerLayer {
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            ff1: Dense::new(ps, &format!("{name}.ff1"), dim, FF_EXPANSION * dim, rng)?,
            ff2: Dense::new(ps, &format!("{name}.ff2"), FF_EXPANSION * dim, dim, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, seq_len: usize) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, seq_len)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.ff1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}
