//! Reverse-mode differentiation tape.
//!
//! Every kernel appends a node holding its output and whatever it needs for
//! the backward pass. Nodes are created in topological order, so the
//! backward pass is a single sweep from the loss down to the first node.
//! Gradients add up at fan-out.

use crate::error::{shape, Error, Result};

use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Input,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normed: Vec<F>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    CenterCols(Var),
    AffineCols {
        x: Var,
        mult: Vec<F>,
    },
    ScaleByElem {
        x: Var,
        w: Var,
        idx: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Per-column mean and biased variance of a matrix, accumulated in `f64`.
pub fn column_moments<F: Real>(x: &Tensor<F>) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_B: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// A constant input: no gradient flows into it.
    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push("input", value, Op::Input, false)
    }

    /// A differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push("leaf", value, Op::Input, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, av.data(), (k as isize, 1), bv.data(), (n as isize, 1), F::zero(), &mut out);
        let g = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), g)
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o + bv.data()[i % c];
        }
        let g = self.needs(x) || self.needs(b);
        self.push("add_bias", out, Op::AddBias(x, b), g)
    }

    fn elementwise2(&self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2("add", a, b, |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2("sub", a, b, |x, y| x - y)?;
        let g = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise2("mul", a, b, |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let g = self.needs(x);
        self.push("scale", out, Op::Scale(x, s), g)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(F::zero()));
        let g = self.needs(x);
        self.push("relu", out, Op::Relu(x), g)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| F::of(gelu(v.f64())));
        let g = self.needs(x);
        self.push("gelu", out, Op::Gelu(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        let g = self.needs(x);
        self.push("tanh", out, Op::Tanh(x), g)
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(shift));
        let (rows, cols) = (xv.rows(), xv.cols());
        if sv.len() != cols || bv.len() != cols {
            return Err(shape("layer_norm", format!("{:?} with {} features", xv.shape(), sv.len())));
        }
        let mut normed = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v.f64() - mean) * inv;
                normed.push(F::of(h));
                out.push(F::of(h * sv.data()[j].f64() + bv.data()[j].f64()));
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                normed,
                inv_std,
            },
            g,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(shape("concat_cols", "nothing to concatenate")),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(dims)?;
        let g = self.needs(x);
        self.push("reshape", out, Op::Reshape(x), g)
    }

    /// Standardizes each column over the rows (the batch) with the batch
    /// mean and biased variance. Variances below `floor` are replaced by it.
    pub fn standardize_cols(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        let (mean, var) = column_moments(xv);
        let cols = xv.cols();
        let floored: Vec<bool> = var.iter().map(|&v| v < floor).collect();
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(floor).sqrt()).collect();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i % cols;
                F::of((v.f64() - mean[c]) * inv_std[c])
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.needs(x);
        self.push("standardize_cols", out, Op::Standardize { x, inv_std, floored }, g)
    }

    /// Subtracts each column's batch mean.
    pub fn center_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (mean, _) = column_moments(xv);
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| F::of(v.f64() - mean[i % cols]))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.needs(x);
        self.push("center_cols", out, Op::CenterCols(x), g)
    }

    /// `(x - shift) * mult` per column with constant `shift` and `mult`.
    pub fn affine_cols(&mut self, x: Var, shift: &[F], mult: &[F]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if shift.len() != cols || mult.len() != cols {
            return Err(shape("affine_cols", format!("{} columns vs {} constants", cols, shift.len())));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - shift[i % cols]) * mult[i % cols])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let g = self.needs(x);
        self.push(
            "affine_cols",
            out,
            Op::AffineCols {
                x,
                mult: mult.to_vec(),
            },
            g,
        )
    }

    /// `x * w[idx]` for a vector-valued `w`.
    pub fn scale_by_elem(&mut self, x: Var, w: Var, idx: usize) -> Result<Var> {
        let wv = self.value(w);
        if idx >= wv.len() {
            return Err(shape("scale_by_elem", format!("index {idx} outside {:?}", wv.shape())));
        }
        let s = wv.data()[idx];
        let out = self.value(x).map(|v| v * s);
        let g = self.needs(x) || self.needs(w);
        self.push("scale_by_elem", out, Op::ScaleByElem { x, w, idx }, g)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Rows are grouped into independent sequences of `group` consecutive
    /// rows; attention never crosses a group boundary. Columns are split
    /// evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, group: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape("attention", "q, k and v must share a shape"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape("attention", format!("model dim {d} not divisible by {heads} heads")));
        }
        if group == 0 || rows % group != 0 {
            return Err(shape("attention", format!("{rows} rows not divisible into groups of {group}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / group;
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![F::zero(); rows * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; group];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..group {
                    let qi = (g * group + i) * d + off;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = (g * group + j) * d + off;
                        let dot: f64 = (0..dh).map(|c| qd[qi + c].f64() * kd[kj + c].f64()).sum();
                        *s = dot * scale;
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    let base = ((g * heads + h) * group + i) * group;
                    for j in 0..group {
                        probs[base + j] = (scores[j] - max).exp() / total;
                    }
                    for c in 0..dh {
                        let acc: f64 = (0..group)
                            .map(|j| probs[base + j] * vd[(g * group + j) * d + off + c].f64())
                            .sum();
                        out[qi + c] = F::of(acc);
                    }
                }
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let g = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            },
            g,
        )
    }

    /// Mean over rows of `-log softmax(logits_r)[targets_r]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(shape("softmax_cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(crate::error::invalid(format!("class index {t} outside {cols} classes")));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
            let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[t].f64();
            probs.extend(row.iter().map(|x| (x.f64() - lse).exp()));
        }
        let out = Tensor::scalar(F::of(loss / rows as f64));
        let g = self.needs(logits);
        self.push(
            "softmax_cross_entropy",
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let g = self.needs(x);
        self.push("sum", Tensor::scalar(F::of(total)), Op::Sum(x), g)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Allows another backward pass on this tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardReused);
        }
        if self.value(loss).len() != 1 {
            return Err(shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<F>| Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape");
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, gd, (n as isize, 1), bv.data(), (1, n as isize), F::zero(), &mut da);
                    acc(grads, *a, like(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, av.data(), (1, k as isize), gd, (n as isize, 1), F::zero(), &mut db);
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    acc(grads, *x, g.clone().reshaped(self.value(*x).shape()).expect("shape"));
                }
                if self.needs(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0f64; c];
                    for (idx, v) in gd.iter().enumerate() {
                        db[idx % c] += v.f64();
                    }
                    acc(grads, *b, like(*b, db.into_iter().map(F::of).collect()));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, like(*a, gd.to_vec()));
                acc(grads, *b, like(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, like(*a, gd.to_vec()));
                acc(grads, *b, like(*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(grads, *a, like(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(*b) {
                    acc(grads, *b, like(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale(x, s) => acc(grads, *x, like(*x, gd.iter().map(|&v| v * *s).collect())),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                acc(grads, *x, like(*x, d));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &x)| g * F::of(gelu_grad(x.f64()))).collect();
                acc(grads, *x, like(*x, d));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&g, &y)| g * (F::one() - y * y)).collect();
                acc(grads, *x, like(*x, d));
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                normed,
                inv_std,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let sv = self.value(*scale).data();
                let mut dscale = vec![0.0f64; cols];
                let mut dshift = vec![0.0f64; cols];
                let mut dx = Vec::with_capacity(gd.len());
                for r in 0..rows {
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let hr = &normed[r * cols..(r + 1) * cols];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        let (gj, hj) = (gr[j].f64(), hr[j].f64());
                        dscale[j] += gj * hj;
                        dshift[j] += gj;
                        let dh = gj * sv[j].f64();
                        m1 += dh;
                        m2 += dh * hj;
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for j in 0..cols {
                        let dh = gr[j].f64() * sv[j].f64();
                        dx.push(F::of(inv_std[r] * (dh - m1 - hr[j].f64() * m2)));
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, like(*x, dx));
                }
                acc(grads, *scale, like(*scale, dscale.into_iter().map(F::of).collect()));
                acc(grads, *shift, like(*shift, dshift.into_iter().map(F::of).collect()));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + start..r * total + start + w]);
                        }
                        acc(grads, p, like(p, d));
                    }
                    start += w;
                }
            }
            Op::Reshape(x) => acc(grads, *x, like(*x, gd.to_vec())),
            Op::Standardize { x, inv_std, floored } => {
                let z = node.value.data();
                let cols = node.value.cols();
                let rows = node.value.rows() as f64;
                let mut mg = vec![0.0; cols];
                let mut mgz = vec![0.0; cols];
                for (i, (&gv, &zv)) in gd.iter().zip(z).enumerate() {
                    mg[i % cols] += gv.f64();
                    mgz[i % cols] += gv.f64() * zv.f64();
                }
                mg.iter_mut().for_each(|v| *v /= rows);
                mgz.iter_mut().for_each(|v| *v /= rows);
                let d = gd
                    .iter()
                    .zip(z)
                    .enumerate()
                    .map(|(i, (&gv, &zv))| {
                        let c = i % cols;
                        let inner = if floored[c] {
                            gv.f64() - mg[c]
                        } else {
                            gv.f64() - mg[c] - zv.f64() * mgz[c]
                        };
                        F::of(inv_std[c] * inner)
                    })
                    .collect();
                acc(grads, *x, like(*x, d));
            }
            Op::CenterCols(x) => {
                let cols = g.cols();
                let rows = g.rows() as f64;
                let mut mg = vec![0.0; cols];
                for (i, v) in gd.iter().enumerate() {
                    mg[i % cols] += v.f64();
                }
                let d = gd
                    .iter()
                    .enumerate()
                    .map(|(i, v)| F::of(v.f64() - mg[i % cols] / rows))
                    .collect();
                acc(grads, *x, like(*x, d));
            }
            Op::AffineCols { x, mult } => {
                let cols = mult.len();
                let d = gd.iter().enumerate().map(|(i, &v)| v * mult[i % cols]).collect();
                acc(grads, *x, like(*x, d));
            }
            Op::ScaleByElem { x, w, idx } => {
                let wv = self.value(*w);
                if self.needs(*x) {
                    let s = wv.data()[*idx];
                    acc(grads, *x, like(*x, gd.iter().map(|&v| v * s).collect()));
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let dot: f64 = gd.iter().zip(xv).map(|(a, b)| a.f64() * b.f64()).sum();
                    let mut dw = vec![F::zero(); wv.len()];
                    dw[*idx] = F::of(dot);
                    acc(grads, *w, like(*w, dw));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let d = node.value.cols();
                let rows = node.value.rows();
                let (heads, group) = (*heads, *group);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0f64; rows * d];
                let mut dk = vec![0.0f64; rows * d];
                let mut dv = vec![0.0f64; rows * d];
                let mut dp = vec![0.0f64; group];
                for gi in 0..rows / group {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..group {
                            let ri = (gi * group + i) * d + off;
                            let base = ((gi * heads + h) * group + i) * group;
                            let p = &probs[base..base + group];
                            for j in 0..group {
                                let rj = (gi * group + j) * d + off;
                                dp[j] = (0..dh).map(|c| gd[ri + c].f64() * vd[rj + c].f64()).sum();
                                for c in 0..dh {
                                    dv[rj + c] += p[j] * gd[ri + c].f64();
                                }
                            }
                            let s: f64 = (0..group).map(|j| p[j] * dp[j]).sum();
                            for j in 0..group {
                                let ds = p[j] * (dp[j] - s) * scale;
                                let rj = (gi * group + j) * d + off;
                                for c in 0..dh {
                                    dq[ri + c] += ds * kd[rj + c].f64();
                                    dk[rj + c] += ds * qd[ri + c].f64();
                                }
                            }
                        }
                    }
                }
                let conv = |x: Vec<f64>| x.into_iter().map(F::of).collect::<Vec<F>>();
                acc(grads, *q, like(*q, conv(dq)));
                acc(grads, *k, like(*k, conv(dk)));
                acc(grads, *v, like(*v, conv(dv)));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).cols();
                let rows = targets.len() as f64;
                let g0 = gd[0].f64();
                let mut d: Vec<F> = probs.iter().map(|&p| F::of(g0 * p / rows)).collect();
                for (r, &t) in targets.iter().enumerate() {
                    let idx = r * cols + t;
                    d[idx] = F::of(g0 * (probs[idx] - 1.0) / rows);
                }
                acc(grads, *logits, like(*logits, d));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, like(*x, vec![gd[0]; n]));
            }
        }
    }
}
