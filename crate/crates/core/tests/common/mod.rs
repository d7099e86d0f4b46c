#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twoway_core::channel::ChannelConfig;
use twoway_core::models::{EpisodeBatch, Mode, ModelSpec, TwoWaySystem};
use twoway_core::nn::gradcheck::{central_difference, relative_error, richardson_difference};
use twoway_core::nn::tape::{Tape, Var};
use twoway_core::nn::tensor::Tensor;
use twoway_core::polar::{encode, PolarSpec};
use twoway_core::rng::Domain;
use twoway_core::Result;

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;
/// Smaller step for whole models, where ReLU kinks are denser.
pub const MODEL_FD_STEP: f64 = 1e-7;
/// Parameters probed per model instance; larger models are subsampled.
pub const MODEL_FD_COORDS: usize = 256;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries with magnitude in `[0.1, 1]` and random sign, so that no entry
/// sits on a ReLU kink.
pub fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A tape operation under test: its input shapes and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable tape operation, at small random shapes.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        case("add", &[&[3, 2], &[3, 2]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 2], &[3, 2]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 2], &[3, 2]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[2, 3]], |t, v| t.scale(v[0], -1.7)),
        case("relu", &[&[4, 3]], |t, v| t.relu(v[0])),
        case("gelu", &[&[4, 3]], |t, v| t.gelu(v[0])),
        case("tanh", &[&[4, 3]], |t, v| t.tanh(v[0])),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("concat_cols", &[&[3, 2], &[3, 1], &[3, 3]], |t, v| t.concat_cols(&[v[0], v[1], v[2]])),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[4, 3])),
        case("standardize_cols", &[&[6, 3]], |t, v| t.standardize_cols(v[0], 1e-6)),
        case("center_cols", &[&[5, 2]], |t, v| t.center_cols(v[0])),
        case("affine_cols", &[&[4, 2]], |t, v| t.affine_cols(v[0], &[0.3, -0.2], &[1.5, 0.7])),
        case("scale_by_elem", &[&[4, 2], &[3]], |t, v| t.scale_by_elem(v[0], v[1], 1)),
        case("attention", &[&[6, 4], &[6, 4], &[6, 4]], |t, v| t.attention(v[0], v[1], v[2], 2, 3)),
        case("softmax_cross_entropy", &[&[4, 5]], |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])),
        case("sum", &[&[3, 3]], |t, v| t.sum(v[0])),
    ]
}

/// Scalar objective `sum(op(x) * r)` for a fixed random projection `r`.
fn objective(op: &OpCase, inputs: &[Vec<f64>], projection: &mut Option<Vec<f64>>, seed: u64, with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let mut vars = Vec::new();
    for (shape, data) in op.shapes.iter().zip(inputs) {
        vars.push(tape.leaf(Tensor::from_f64(shape, data)?)?);
    }
    let out = (op.build)(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len();
    let r = projection.get_or_insert_with(|| away_from_zero(&mut rng(seed ^ 0xabc), n)).clone();
    let rv = tape.input(Tensor::from_f64(&out_shape, &r)?)?;
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod)?;
    let value = tape.value(loss).item();
    let mut grads = Vec::new();
    if with_grad {
        tape.backward(loss)?;
        for (&v, shape) in vars.iter().zip(&op.shapes) {
            let len: usize = shape.iter().product();
            grads.push(tape.grad(v).map(|g| g.to_f64()).unwrap_or_else(|| vec![0.0; len]));
        }
    }
    Ok((value, grads))
}

/// Relative error between tape and finite-difference gradients of `op` at
/// one random input.
pub fn check_op(op: &OpCase, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Vec<f64>> = op
        .shapes
        .iter()
        .map(|s| away_from_zero(&mut r, s.iter().product()))
        .collect();
    let mut projection = None;
    let (_, analytic) = objective(op, &inputs, &mut projection, seed, true)?;
    let flat: Vec<f64> = inputs.concat();
    let sizes: Vec<usize> = inputs.iter().map(|v| v.len()).collect();
    let unflatten = |x: &[f64]| {
        let mut out = Vec::new();
        let mut off = 0;
        for &n in &sizes {
            out.push(x[off..off + n].to_vec());
            off += n;
        }
        out
    };
    let coords: Vec<usize> = (0..flat.len()).collect();
    let numeric = central_difference(
        |x| objective(op, &unflatten(x), &mut projection.clone(), seed, false).unwrap().0,
        &flat,
        &coords,
        FD_STEP,
    );
    Ok(relative_error(&analytic.concat(), &numeric))
}

/// Tiny model of each kind for gradient checks.
pub fn tiny_specs() -> Vec<ModelSpec> {
    let shrink = |mut s: ModelSpec| {
        s.hidden = 4;
        s.head_hidden = 4;
        s.enc_layers = s.enc_layers.min(1);
        s.dec_layers = s.dec_layers.min(1);
        s
    };
    vec![
        shrink(ModelSpec::twlc(2, 3)),
        shrink(ModelSpec::alc(2, 3)),
        shrink(ModelSpec::lc(2, 3)),
        shrink(ModelSpec::twbaf(1, 3, 2)),
    ]
}

fn model_loss(sys: &TwoWaySystem<f64>, batch: &EpisodeBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let g = sys.forward(&mut tape, batch, Mode::Train)?;
    let loss = sys.loss(&mut tape, &g, batch)?;
    Ok(tape.value(loss).item())
}

/// Relative error of the full-model gradient against finite differences,
/// over trainable parameters of both users (a seeded random subset of
/// `MODEL_FD_COORDS` of them when the model is larger).
pub fn check_model(spec: &ModelSpec, seed: u64) -> Result<f64> {
    let mut sys = TwoWaySystem::<f64>::new(spec.clone(), seed)?;
    let ch = ChannelConfig::with_power(3.0, 6.0, 1.0, spec.uses)?;
    let batch = EpisodeBatch::sample(spec, &ch, seed, (Domain::TrainBits, Domain::TrainNoise), 0, 6);
    let mut tape = Tape::new();
    let g = sys.forward(&mut tape, &batch, Mode::Train)?;
    let loss = sys.loss(&mut tape, &g, &batch)?;
    tape.backward(loss)?;
    for i in 0..2 {
        sys.params[i].zero_grad();
        sys.params[i].accumulate_grads(&tape, &g.bound[i]);
    }
    let analytic = [sys.params[0].flat_grads(), sys.params[1].flat_grads()].concat();
    let split = sys.params[0].num_trainable();
    let flat = [sys.params[0].flat_values(), sys.params[1].flat_values()].concat();
    let mut coords: Vec<usize> = (0..flat.len()).collect();
    if coords.len() > MODEL_FD_COORDS {
        coords = rand::seq::index::sample(&mut rng(seed ^ 0xc00d), flat.len(), MODEL_FD_COORDS).into_vec();
        coords.sort_unstable();
    }
    let mut probe = sys.clone();
    let numeric = richardson_difference(
        |x| {
            probe.params[0].set_flat_values(&x[..split]).unwrap();
            probe.params[1].set_flat_values(&x[split..]).unwrap();
            model_loss(&probe, &batch).unwrap()
        },
        &flat,
        &coords,
        MODEL_FD_STEP,
    );
    let analytic: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    Ok(relative_error(&analytic, &numeric))
}

/// Maximum-likelihood decoding by exhaustive codebook search: the message
/// whose BPSK codeword is nearest to `received` on the transmitted positions.
pub fn ml_decode(received: &[f64], spec: &PolarSpec, power: f64) -> Vec<u8> {
    let k = spec.k;
    let mut best = (f64::INFINITY, vec![0u8; k]);
    for idx in 0..1usize << k {
        let msg: Vec<u8> = (0..k).map(|j| ((idx >> (k - 1 - j)) & 1) as u8).collect();
        let cw = encode(&msg, spec, power).unwrap();
        let d: f64 = cw.iter().zip(received).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.0 {
            best = (d, msg);
        }
    }
    best.1
}
