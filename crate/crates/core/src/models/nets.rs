//! Encoder and decoder networks.

use rand::Rng;

use crate::error::Result;
use crate::nn::layers::positional_encoding;
use crate::nn::{Bound, Dense, LayerNorm, ParameterSet, Real, Tape, Tensor, TransformerLayer, Var};

/// LightCode-style network: a three-layer feature extractor with a skip
/// connection from the first layer, layer norm, and a two-layer MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct LcNet {
    pub fe1: Dense,
    pub fe2: Dense,
    pub fe3: Dense,
    pub norm: LayerNorm,
    pub head1: Dense,
    pub head2: Dense,
}

impl LcNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        input: usize,
        hidden: usize,
        head_hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fe1: Dense::new(ps, &format!("{name}.fe1"), input, hidden, rng)?,
            fe2: Dense::new(ps, &format!("{name}.fe2"), hidden, hidden, rng)?,
            fe3: Dense::new(ps, &format!("{name}.fe3"), hidden, hidden, rng)?,
            norm: LayerNorm::new(ps, &format!("{name}.ln"), hidden)?,
            head1: Dense::new(ps, &format!("{name}.head1"), hidden, head_hidden, rng)?,
            head2: Dense::new(ps, &format!("{name}.head2"), head_hidden, output, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h1 = self.fe1.forward(tape, p, x)?;
        let h1 = tape.relu(h1)?;
        let h2 = self.fe2.forward(tape, p, h1)?;
        let h2 = tape.relu(h2)?;
        let h3 = self.fe3.forward(tape, p, h2)?;
        let h = tape.add(h3, h1)?;
        let h = self.norm.forward(tape, p, h)?;
        let h = self.head1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        self.head2.forward(tape, p, h)
    }
}

/// Block attention network: MLP embedding, sinusoidal positions, a stack of
/// pre-norm transformer layers over the tokens of an episode, and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct BafNet {
    pub fe1: Dense,
    pub fe2: Dense,
    pub fe3: Dense,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub head: Dense,
    pub dim: usize,
    /// Positional encoding switch; off only to probe permutation behaviour.
    pub positional: bool,
}

impl BafNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        ps: &mut ParameterSet<F>,
        name: &str,
        input: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fe1: Dense::new(ps, &format!("{name}.fe1"), input, dim, rng)?,
            fe2: Dense::new(ps, &format!("{name}.fe2"), dim, dim, rng)?,
            fe3: Dense::new(ps, &format!("{name}.fe3"), dim, dim, rng)?,
            layers: (0..layers)
                .map(|i| TransformerLayer::new(ps, &format!("{name}.layer{i}"), dim, heads, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(ps, &format!("{name}.ln"), dim)?,
            head: Dense::new(ps, &format!("{name}.head"), dim, output, rng)?,
            dim,
            positional: true,
        })
    }

    /// `x` stacks episodes of `tokens` consecutive rows.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, tokens: usize) -> Result<Var> {
        let h = self.fe1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.fe2.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let mut h = self.fe3.forward(tape, p, h)?;
        if self.positional {
            let rows = tape.value(h).rows();
            let table = positional_encoding::<F>(tokens, self.dim);
            let tiled: Vec<F> = table.data().iter().copied().cycle().take(rows * self.dim).collect();
            let pe = tape.input(Tensor::matrix(rows, self.dim, tiled)?)?;
            h = tape.add(h, pe)?;
        }
        for layer in &self.layers {
            h = layer.forward(tape, p, h, tokens)?;
        }
        let h = self.norm.forward(tape, p, h)?;
        self.head.forward(tape, p, h)
    }
}

/// Either network family.
#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Lc(LcNet),
    Baf(BafNet),
}

impl Net {
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, tokens: usize) -> Result<Var> {
        match self {
            Net::Lc(n) => n.forward(tape, p, x),
            Net::Baf(n) => n.forward(tape, p, x, tokens),
        }
    }

    pub fn set_positional(&mut self, on: bool) {
        if let Net::Baf(n) = self {
            n.positional = on;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};

    #[test]
    fn lc_net_shapes() {
        let mut rng = substream(5, Domain::Stub, 0, 0);
        let mut ps = ParameterSet::<f64>::new();
        let net = LcNet::new(&mut ps, "enc", 7, 8, 4, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape).unwrap();
        let x = tape.input(Tensor::full(&[3, 7], 0.5)).unwrap();
        let y = net.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 1]);
        let bad = tape.input(Tensor::full(&[3, 6], 0.5)).unwrap();
        assert!(net.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn baf_without_positions_is_permutation_equivariant() {
        let mut rng = substream(6, Domain::Stub, 0, 0);
        let mut ps = ParameterSet::<f64>::new();
        let mut net = BafNet::new(&mut ps, "enc", 5, 8, 2, 2, 3, &mut rng).unwrap();
        net.positional = false;
        let rows: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let swapped: Vec<f64> = [&rows[10..15], &rows[5..10], &rows[0..5]].concat();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape).unwrap();
            let x = tape.input(Tensor::matrix(3, 5, data).unwrap()).unwrap();
            let y = net.forward(&mut tape, &p, x, 3).unwrap();
            tape.value(y).clone()
        };
        let a = run(rows);
        let b = run(swapped);
        for (ra, rb) in [(0, 2), (1, 1), (2, 0)] {
            for (x, y) in a.row(ra).iter().zip(b.row(rb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
