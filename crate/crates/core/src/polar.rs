//! Polar codes with successive-cancellation decoding, used as the
//! open-loop (no feedback) baseline on the two-way channel.
//!
//! The transform is `x = u F^{(x)n}` with `F = [[1, 0], [1, 1]]` in natural
//! (non bit-reversed) order. Lengths that are not powers of two are reached
//! by puncturing random positions of the next power-of-two mother code.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{snr_to_noise_variance, ChannelConfig, User};
use crate::error::{invalid, Result};
use crate::rng::{substream, Domain};

/// A constructed (possibly punctured) polar code.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarSpec {
    /// Mother code length, a power of two.
    pub n: usize,
    pub k: usize,
    /// `frozen[i]` is true when `u_i` is fixed to zero.
    pub frozen: Vec<bool>,
    pub design_snr_db: f64,
    /// Codeword positions that are never transmitted, sorted.
    pub punctured: Vec<usize>,
}

impl PolarSpec {
    /// `(t, k)` code designed at `design_snr_db`; the `n - t` punctured
    /// positions are drawn from `seed`.
    pub fn new(t: usize, k: usize, design_snr_db: f64, power: f64, seed: u64) -> Result<Self> {
        if t == 0 || k == 0 || k > t {
            return Err(invalid(format!("need 0 < K <= T, got K={k}, T={t}")));
        }
        let n = t.next_power_of_two();
        let mut punctured = if n > t {
            let mut rng = substream(seed, Domain::Puncture, n as u64, t as u64);
            sample(&mut rng, n, n - t).into_vec()
        } else {
            Vec::new()
        };
        punctured.sort_unstable();
        let frozen = construct_punctured(n, k, design_snr_db, power, &punctured)?;
        let mut mask = vec![false; n];
        frozen.iter().for_each(|&i| mask[i] = true);
        Ok(Self {
            n,
            k,
            frozen: mask,
            design_snr_db,
            punctured,
        })
    }

    /// Transmitted length `T`.
    pub fn len(&self) -> usize {
        self.n - self.punctured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn info_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.frozen[i]).collect()
    }

    /// Mother-code positions that are transmitted, in channel order.
    pub fn transmitted(&self) -> Vec<usize> {
        (0..self.n).filter(|i| self.punctured.binary_search(i).is_err()).collect()
    }
}

/// Bhattacharyya parameters of the `n` synthetic channels of a BPSK-AWGN
/// channel at `snr_db`, in natural index order.
pub fn bhattacharyya(n: usize, snr_db: f64, power: f64) -> Result<Vec<f64>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(invalid(format!("block length {n} is not a power of two")));
    }
    let sigma_sq = snr_to_noise_variance(snr_db, power)?;
    let mut z = vec![(-power / (2.0 * sigma_sq)).exp()];
    while z.len() < n {
        z = z.iter().flat_map(|&v| [2.0 * v - v * v, v * v]).collect();
    }
    Ok(z)
}

/// Bhattacharyya parameters of the synthetic channels when codeword position
/// `j` sees a channel with parameter `channel[j]`.
pub fn synthetic_bhattacharyya(channel: &[f64]) -> Vec<f64> {
    if channel.len() == 1 {
        return channel.to_vec();
    }
    let h = channel.len() / 2;
    let (a, b) = channel.split_at(h);
    let worse: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x + y - x * y).collect();
    let better: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let mut z = synthetic_bhattacharyya(&worse);
    z.extend(synthetic_bhattacharyya(&better));
    z
}

/// Frozen set: the `n - k` synthetic channels with the largest Bhattacharyya
/// parameter (ties resolved towards lower indices), sorted.
pub fn construct(n: usize, k: usize, design_snr_db: f64, power: f64) -> Result<Vec<usize>> {
    construct_punctured(n, k, design_snr_db, power, &[])
}

/// [`construct`] with the given codeword positions never transmitted; their
/// channels are treated as useless (`Z = 1`).
pub fn construct_punctured(n: usize, k: usize, design_snr_db: f64, power: f64, punctured: &[usize]) -> Result<Vec<usize>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(invalid(format!("block length {n} is not a power of two")));
    }
    if k > n {
        return Err(invalid(format!("K={k} exceeds N={n}")));
    }
    if let Some(&p) = punctured.iter().find(|&&p| p >= n) {
        return Err(invalid(format!("punctured position {p} outside N={n}")));
    }
    if n - punctured.len() < k {
        return Err(invalid(format!("{} transmitted positions cannot carry K={k}", n - punctured.len())));
    }
    let z0 = bhattacharyya(1, design_snr_db, power)?[0];
    let mut channel = vec![z0; n];
    punctured.iter().for_each(|&p| channel[p] = 1.0);
    let z = synthetic_bhattacharyya(&channel);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut frozen = order[..n - k].to_vec();
    frozen.sort_unstable();
    Ok(frozen)
}

/// In-place polar transform over GF(2).
pub fn transform(bits: &mut [u8]) {
    let n = bits.len();
    let mut half = n / 2;
    while half >= 1 {
        for block in (0..n).step_by(2 * half) {
            for i in block..block + half {
                bits[i] ^= bits[i + half];
            }
        }
        half /= 2;
    }
}

/// Mother codeword bits for `k` message bits.
pub fn encode_bits(bits: &[u8], spec: &PolarSpec) -> Result<Vec<u8>> {
    if bits.len() != spec.k {
        return Err(invalid(format!("expected {} message bits, got {}", spec.k, bits.len())));
    }
    let mut u = vec![0u8; spec.n];
    for (slot, &b) in spec.info_indices().iter().zip(bits) {
        if b > 1 {
            return Err(invalid("bits must be 0 or 1"));
        }
        u[*slot] = b;
    }
    transform(&mut u);
    Ok(u)
}

/// Transmitted BPSK symbols `sqrt(P) (1 - 2x)` for the unpunctured positions.
pub fn encode(bits: &[u8], spec: &PolarSpec, power: f64) -> Result<Vec<f64>> {
    let x = encode_bits(bits, spec)?;
    let amp = power.sqrt();
    Ok(spec
        .transmitted()
        .into_iter()
        .map(|i| amp * (1.0 - 2.0 * x[i] as f64))
        .collect())
}

/// Channel LLRs for the mother code; punctured positions get zero.
pub fn channel_llrs(received: &[f64], spec: &PolarSpec, power: f64, sigma_sq: f64) -> Result<Vec<f64>> {
    if received.len() != spec.len() {
        return Err(invalid(format!("expected {} symbols, got {}", spec.len(), received.len())));
    }
    let scale = 2.0 * power.sqrt() / sigma_sq;
    let mut llr = vec![0.0; spec.n];
    for (i, y) in spec.transmitted().into_iter().zip(received) {
        llr[i] = scale * y;
    }
    Ok(llr)
}

/// Exact check-node combination `2 atanh(tanh(a/2) tanh(b/2))`.
pub fn boxplus(a: f64, b: f64) -> f64 {
    let sign = a.signum() * b.signum();
    sign * a.abs().min(b.abs()) + (-(a + b).abs()).exp().ln_1p() - (-(a - b).abs()).exp().ln_1p()
}

fn hard(llr: f64) -> u8 {
    u8::from(llr < 0.0)
}

fn sc(llr: &[f64], frozen: &[bool], u: &mut Vec<u8>) -> Vec<u8> {
    if llr.len() == 1 {
        let bit = if frozen[0] { 0 } else { hard(llr[0]) };
        u.push(bit);
        return vec![bit];
    }
    let h = llr.len() / 2;
    let (l1, l2) = llr.split_at(h);
    let la: Vec<f64> = l1.iter().zip(l2).map(|(&a, &b)| boxplus(a, b)).collect();
    let a = sc(&la, &frozen[..h], u);
    let lb: Vec<f64> = l1
        .iter()
        .zip(l2)
        .zip(&a)
        .map(|((&x, &y), &ab)| y + if ab == 0 { x } else { -x })
        .collect();
    let b = sc(&lb, &frozen[h..], u);
    a.iter().zip(&b).map(|(x, y)| x ^ y).chain(b.iter().copied()).collect()
}

/// Successive-cancellation decoding of mother-code LLRs to the `k` message bits.
pub fn sc_decode(llrs: &[f64], spec: &PolarSpec) -> Result<Vec<u8>> {
    if llrs.len() != spec.n {
        return Err(invalid(format!("expected {} LLRs, got {}", spec.n, llrs.len())));
    }
    let mut u = Vec::with_capacity(spec.n);
    sc(llrs, &spec.frozen, &mut u);
    Ok(spec.info_indices().into_iter().map(|i| u[i]).collect())
}

/// Block errors of one direction over `trials` messages.
pub fn direction_errors(
    spec: &PolarSpec,
    power: f64,
    sigma_sq: f64,
    seed: u64,
    direction: User,
    first: u64,
    trials: usize,
) -> Result<usize> {
    let mut errors = 0;
    let std = sigma_sq.sqrt();
    for trial in first..first + trials as u64 {
        let mut rng = substream(seed, Domain::Polar, trial, direction.index() as u64);
        let bits: Vec<u8> = (0..spec.k).map(|_| rng.gen_range(0..2u8)).collect();
        let received: Vec<f64> = encode(&bits, spec, power)?
            .into_iter()
            .map(|s| s + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let llr = channel_llrs(&received, spec, power, sigma_sq)?;
        if sc_decode(&llr, spec)? != bits {
            errors += 1;
        }
    }
    Ok(errors)
}

/// Open-loop two-way result.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopReport {
    pub bler: [f64; 2],
    pub trials: usize,
}

impl OpenLoopReport {
    pub fn sum_bler(&self) -> f64 {
        self.bler[0] + self.bler[1]
    }
}

/// Codes for both directions of an open-loop exchange: each user sends a
/// `(T, K)` code designed at its own link SNR.
pub fn direction_specs(t: usize, k: usize, channel: &ChannelConfig, seed: u64) -> Result<[PolarSpec; 2]> {
    let make = |u: User| PolarSpec::new(t, k, channel.snr_db(u), channel.power(u), seed);
    Ok([make(User::One)?, make(User::Two)?])
}

/// Both users send `K` bits over `T` uses with no feedback; returns each
/// direction's block error rate.
pub fn open_loop_bler(t: usize, k: usize, channel: &ChannelConfig, trials: usize, seed: u64) -> Result<OpenLoopReport> {
    if trials == 0 {
        return Err(invalid("need at least one trial"));
    }
    let specs = direction_specs(t, k, channel, seed)?;
    let mut bler = [0.0; 2];
    for (i, u) in [User::One, User::Two].into_iter().enumerate() {
        let e = direction_errors(&specs[i], channel.power(u), channel.noise_variance(u), seed, u, 0, trials)?;
        bler[i] = e as f64 / trials as f64;
    }
    Ok(OpenLoopReport { bler, trials })
}
