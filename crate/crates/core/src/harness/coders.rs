//! Coders the evaluator can drive: trained systems, the one-way pair, the
//! polar baseline and analytic stubs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{ChannelConfig, User};
use crate::error::{invalid, Result};
use crate::knowledge::index_to_bits;
use crate::models::{EpisodeBatch, Mode, TwoWaySystem};
use crate::polar::{channel_llrs, encode, sc_decode, PolarSpec};
use crate::rng::{substream, Domain};

/// Something that sends sub-blocks of `M` bits, `tokens` of them per episode.
///
/// `decode` receives the message bits of consecutive episodes starting at
/// global episode index `first` (one row of `M` bits per episode and token,
/// zeros for a user without a message) and returns what the other side
/// decoded, in the same layout.
pub trait SubBlockCoder: Sync {
    fn label(&self) -> String;

    fn sub_block_bits(&self) -> usize;

    fn tokens(&self) -> usize;

    /// Channel uses per sub-block.
    fn uses(&self) -> usize;

    /// Users that carry a message.
    fn active(&self) -> [bool; 2];

    /// Channel uses spent on a `k`-bit message.
    fn total_uses(&self, k: usize) -> usize {
        k / self.sub_block_bits() * self.uses()
    }

    fn decode(&self, channel: &ChannelConfig, seed: u64, first: u64, bits: &[Vec<u8>; 2]) -> Result<[Option<Vec<u8>>; 2]>;
}

fn episodes_in(bits: &[u8], per_episode: usize) -> Result<usize> {
    if per_episode == 0 || !bits.len().is_multiple_of(per_episode) {
        return Err(invalid("bits do not fill whole episodes"));
    }
    Ok(bits.len() / per_episode)
}

fn indices_to_bits(indices: &[usize], m: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(indices.len() * m);
    for &k in indices {
        out.extend(index_to_bits(k, m)?);
    }
    Ok(out)
}

fn run_system(
    sys: &TwoWaySystem<f32>,
    channel: &ChannelConfig,
    seed: u64,
    domain: Domain,
    first: u64,
    bits: [Vec<u8>; 2],
) -> Result<[Option<Vec<u8>>; 2]> {
    let spec = &sys.spec;
    let n = episodes_in(&bits[0], spec.message_bits())?;
    let len = spec.episode_uses();
    let mut noise = [Vec::with_capacity(n * len), Vec::with_capacity(n * len)];
    for e in first..first + n as u64 {
        for (i, user) in [User::One, User::Two].into_iter().enumerate() {
            noise[i].extend(channel.episode_noise(seed, domain, e, user, len));
        }
    }
    let batch = EpisodeBatch::from_parts(spec, n, bits, noise)?;
    let d = sys.decide(&batch, Mode::Frozen)?;
    let mut out = [None, None];
    for i in 0..2 {
        if let Some(est) = &d.estimates[i] {
            out[i] = Some(indices_to_bits(est, spec.bits)?);
        }
    }
    Ok(out)
}

/// A trained system evaluated with frozen statistics.
pub struct LearnedCoder {
    pub system: TwoWaySystem<f32>,
}

impl LearnedCoder {
    pub fn new(system: TwoWaySystem<f32>) -> Result<Self> {
        if !system.is_calibrated() {
            return Err(invalid("system has no stored normalization statistics"));
        }
        Ok(Self { system })
    }
}

impl SubBlockCoder for LearnedCoder {
    fn label(&self) -> String {
        self.system.spec.kind.name().to_string()
    }

    fn sub_block_bits(&self) -> usize {
        self.system.spec.bits
    }

    fn tokens(&self) -> usize {
        self.system.spec.tokens
    }

    fn uses(&self) -> usize {
        self.system.spec.uses
    }

    fn active(&self) -> [bool; 2] {
        [true, !self.system.spec.kind.is_one_way()]
    }

    fn decode(&self, channel: &ChannelConfig, seed: u64, first: u64, bits: &[Vec<u8>; 2]) -> Result<[Option<Vec<u8>>; 2]> {
        run_system(&self.system, channel, seed, Domain::EvalNoise, first, bits.clone())
    }
}

/// One-way operation of a two-way channel: each direction gets its own
/// session of `T_M` uses, run by a one-way coder trained for that
/// direction's forward and feedback SNRs.
pub struct OneWayPair {
    /// Carries user 1's message (forward SNR is `snr1`).
    pub forward: TwoWaySystem<f32>,
    /// Carries user 2's message; trained with the SNRs swapped.
    pub backward: TwoWaySystem<f32>,
}

impl OneWayPair {
    pub fn new(forward: TwoWaySystem<f32>, backward: TwoWaySystem<f32>) -> Result<Self> {
        if !forward.spec.kind.is_one_way() || !backward.spec.kind.is_one_way() {
            return Err(invalid("a one-way pair needs one-way coders"));
        }
        if forward.spec.bits != backward.spec.bits || forward.spec.uses != backward.spec.uses {
            return Err(invalid("both directions must share M and T_M"));
        }
        if !forward.is_calibrated() || !backward.is_calibrated() {
            return Err(invalid("system has no stored normalization statistics"));
        }
        Ok(Self { forward, backward })
    }
}

impl SubBlockCoder for OneWayPair {
    fn label(&self) -> String {
        format!("{}-pair", self.forward.spec.kind.name())
    }

    fn sub_block_bits(&self) -> usize {
        self.forward.spec.bits
    }

    fn tokens(&self) -> usize {
        1
    }

    fn uses(&self) -> usize {
        self.forward.spec.uses
    }

    fn active(&self) -> [bool; 2] {
        [true, true]
    }

    fn total_uses(&self, k: usize) -> usize {
        2 * k / self.sub_block_bits() * self.uses()
    }

    fn decode(&self, channel: &ChannelConfig, seed: u64, first: u64, bits: &[Vec<u8>; 2]) -> Result<[Option<Vec<u8>>; 2]> {
        let zeros = vec![0u8; bits[0].len()];
        let fwd = run_system(&self.forward, channel, seed, Domain::EvalNoise, first, [bits[0].clone(), zeros.clone()])?;
        let swapped = ChannelConfig::new(
            channel.snr_db(User::Two),
            channel.snr_db(User::One),
            channel.power(User::Two),
            channel.power(User::One),
            channel.block_uses,
        )?;
        let bwd = run_system(&self.backward, &swapped, seed, Domain::ReverseNoise, first, [bits[1].clone(), zeros])?;
        Ok([fwd[0].clone(), bwd[0].clone()])
    }
}

/// Open-loop polar baseline: each user sends one `(T, K)` codeword per
/// message with no feedback. The code for each direction is designed at
/// that direction's evaluation SNR.
pub struct PolarCoder {
    pub k: usize,
    pub t: usize,
    /// Seed for the puncturing pattern.
    pub construction_seed: u64,
}

impl SubBlockCoder for PolarCoder {
    fn label(&self) -> String {
        "polar".into()
    }

    fn sub_block_bits(&self) -> usize {
        self.k
    }

    fn tokens(&self) -> usize {
        1
    }

    fn uses(&self) -> usize {
        self.t
    }

    fn active(&self) -> [bool; 2] {
        [true, true]
    }

    fn decode(&self, channel: &ChannelConfig, seed: u64, first: u64, bits: &[Vec<u8>; 2]) -> Result<[Option<Vec<u8>>; 2]> {
        let mut out = [None, None];
        for (i, user) in [User::One, User::Two].into_iter().enumerate() {
            let spec = PolarSpec::new(self.t, self.k, channel.snr_db(user), channel.power(user), self.construction_seed)?;
            let (power, sigma_sq) = (channel.power(user), channel.noise_variance(user));
            let n = episodes_in(&bits[i], self.k)?;
            let mut decoded = Vec::with_capacity(bits[i].len());
            for (e, msg) in (first..first + n as u64).zip(bits[i].chunks(self.k)) {
                let mut rng = substream(seed, Domain::EvalNoise, e, i as u64);
                let received: Vec<f64> = encode(msg, &spec, power)?
                    .into_iter()
                    .map(|s| s + sigma_sq.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                decoded.extend(sc_decode(&channel_llrs(&received, &spec, power, sigma_sq)?, &spec)?);
            }
            out[i] = Some(decoded);
        }
        Ok(out)
    }
}

/// Behaviour of a [`StubCoder`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StubKind {
    /// Returns the sent bits.
    Perfect,
    /// Returns uniformly random bits.
    Random,
    /// Corrupts the first sub-block of a message with probability 1/2.
    Coin,
    /// Always corrupts one bit of sub-block `index` of every message.
    Fault { index: usize },
}

/// Decoder with a known error rate, for checking the evaluator itself.
pub struct StubCoder {
    pub kind: StubKind,
    pub m: usize,
    pub tokens: usize,
    /// Message length, so the stub can tell which message an episode belongs to.
    pub k: usize,
}

impl SubBlockCoder for StubCoder {
    fn label(&self) -> String {
        format!("stub-{:?}", self.kind).to_lowercase()
    }

    fn sub_block_bits(&self) -> usize {
        self.m
    }

    fn tokens(&self) -> usize {
        self.tokens
    }

    fn uses(&self) -> usize {
        1
    }

    fn active(&self) -> [bool; 2] {
        [true, true]
    }

    fn decode(&self, _channel: &ChannelConfig, seed: u64, first: u64, bits: &[Vec<u8>; 2]) -> Result<[Option<Vec<u8>>; 2]> {
        let per_episode = self.m * self.tokens;
        let episodes_per_message = (self.k / per_episode).max(1) as u64;
        let mut out = [None, None];
        for i in 0..2 {
            let mut decoded = bits[i].clone();
            for (e, ep) in (first..).zip(decoded.chunks_mut(per_episode)) {
                let mut rng = substream(seed, Domain::Stub, e, i as u64);
                let position = (e % episodes_per_message) as usize * self.tokens;
                match self.kind {
                    StubKind::Perfect => {}
                    StubKind::Random => ep.iter_mut().for_each(|b| *b = rng.gen_range(0..2)),
                    StubKind::Coin => {
                        let message = e / episodes_per_message;
                        let mut coin = substream(seed, Domain::Stub, message, 2 + i as u64);
                        if position == 0 && coin.gen_bool(0.5) {
                            ep[0] ^= 1;
                        }
                    }
                    StubKind::Fault { index } => {
                        if (position..position + self.tokens).contains(&index) {
                            ep[(index - position) * self.m] ^= 1;
                        }
                    }
                }
            }
            out[i] = Some(decoded);
        }
        Ok(out)
    }
}
