//! Gaussian two-way channel.
//!
//! Both users transmit one real symbol per channel use. The symbol sent by
//! user `i` reaches user `j != i` corrupted by zero-mean Gaussian noise whose
//! variance is set by that direction's SNR.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{substream, Domain};

/// One of the two users of the channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum User {
    One,
    Two,
}

impl User {
    pub fn other(self) -> User {
        match self {
            User::One => User::Two,
            User::Two => User::One,
        }
    }

    pub fn index(self) -> usize {
        match self {
            User::One => 0,
            User::Two => 1,
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Noise variance that yields `snr_db` for a transmitter of average power `power`.
pub fn snr_to_noise_variance(snr_db: f64, power: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(invalid(format!("SNR must be finite, got {snr_db}")));
    }
    if !(power > 0.0) || !power.is_finite() {
        return Err(invalid(format!("power must be positive, got {power}")));
    }
    Ok(power * 10f64.powf(-snr_db / 10.0))
}

/// Static description of a two-way channel.
///
/// `snr1_db` is the SNR of the link from user 1 to user 2, `snr2_db` the link
/// from user 2 to user 1. `block_uses` is the number of channel uses `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr1_db: f64,
    pub snr2_db: f64,
    pub power1: f64,
    pub power2: f64,
    pub block_uses: usize,
}

impl ChannelConfig {
    pub fn new(snr1_db: f64, snr2_db: f64, power1: f64, power2: f64, block_uses: usize) -> Result<Self> {
        if block_uses == 0 {
            return Err(invalid("block_uses must be at least 1"));
        }
        // Validates power and SNR as a side effect.
        snr_to_noise_variance(snr1_db, power1)?;
        snr_to_noise_variance(snr2_db, power2)?;
        Ok(Self {
            snr1_db,
            snr2_db,
            power1,
            power2,
            block_uses,
        })
    }

    /// Both users at the same linear power.
    pub fn with_power(snr1_db: f64, snr2_db: f64, power: f64, block_uses: usize) -> Result<Self> {
        Self::new(snr1_db, snr2_db, power, power, block_uses)
    }

    pub fn power(&self, user: User) -> f64 {
        match user {
            User::One => self.power1,
            User::Two => self.power2,
        }
    }

    pub fn snr_db(&self, user: User) -> f64 {
        match user {
            User::One => self.snr1_db,
            User::Two => self.snr2_db,
        }
    }

    /// Variance of the noise added to symbols *sent by* `user`.
    pub fn noise_variance(&self, user: User) -> f64 {
        self.power(user) * 10f64.powf(-self.snr_db(user) / 10.0)
    }

    /// Noise for the symbols sent by `user` in one episode.
    ///
    /// Each `(episode, user)` pair owns its own substream of `master`, so the
    /// result does not depend on how episodes are batched or parallelised.
    pub fn episode_noise(&self, master: u64, domain: Domain, episode: u64, user: User, len: usize) -> Vec<f64> {
        let std = self.noise_variance(user).sqrt();
        let mut rng = substream(master, domain, episode, user.index() as u64);
        (0..len)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// One channel use in both directions: returns `(y1, y2)` where `y2 = c1 + n1`
/// and `y1 = c2 + n2`.
pub fn exchange_step<R: Rng + ?Sized>(c1: f64, c2: f64, sigma1_sq: f64, sigma2_sq: f64, rng: &mut R) -> (f64, f64) {
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    let y2 = c1 + sigma1_sq.sqrt() * n1;
    let y1 = c2 + sigma2_sq.sqrt() * n2;
    (y1, y2)
}

/// Full record of one exchange of `T` channel uses.
///
/// `noise_i` is the noise on symbols sent by user `i`, so
/// `received_j = sent_i + noise_i` for `j != i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub sent1: Vec<f64>,
    pub sent2: Vec<f64>,
    pub received1: Vec<f64>,
    pub received2: Vec<f64>,
    pub noise1: Vec<f64>,
    pub noise2: Vec<f64>,
}

impl EpisodeTrace {
    /// Builds a trace from sent symbols and sampled noise.
    ///
    /// The stored noise is the realized difference `received - sent`, which
    /// can differ from the sample by one rounding step.
    pub fn from_noise(sent1: Vec<f64>, sent2: Vec<f64>, noise1: &[f64], noise2: &[f64]) -> Result<Self> {
        let t = sent1.len();
        if sent2.len() != t || noise1.len() != t || noise2.len() != t {
            return Err(invalid("episode vectors must share one length"));
        }
        let received2: Vec<f64> = sent1.iter().zip(noise1).map(|(c, n)| c + n).collect();
        let received1: Vec<f64> = sent2.iter().zip(noise2).map(|(c, n)| c + n).collect();
        Ok(Self::from_received(sent1, sent2, received1, received2))
    }

    /// Builds a trace from what was sent and what arrived.
    pub fn from_received(sent1: Vec<f64>, sent2: Vec<f64>, received1: Vec<f64>, received2: Vec<f64>) -> Self {
        let noise1 = received2.iter().zip(&sent1).map(|(y, c)| y - c).collect();
        let noise2 = received1.iter().zip(&sent2).map(|(y, c)| y - c).collect();
        Self {
            sent1,
            sent2,
            received1,
            received2,
            noise1,
            noise2,
        }
    }

    pub fn len(&self) -> usize {
        self.sent1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sent1.is_empty()
    }

    pub fn sent(&self, user: User) -> &[f64] {
        match user {
            User::One => &self.sent1,
            User::Two => &self.sent2,
        }
    }

    pub fn received(&self, user: User) -> &[f64] {
        match user {
            User::One => &self.received1,
            User::Two => &self.received2,
        }
    }

    pub fn noise(&self, user: User) -> &[f64] {
        match user {
            User::One => &self.noise1,
            User::Two => &self.noise2,
        }
    }

    /// Energy `sum_t c_t^2` spent by `user` in this episode.
    pub fn energy(&self, user: User) -> f64 {
        self.sent(user).iter().map(|c| c * c).sum()
    }
}

/// Batch average of the per-episode energy spent by `user`.
pub fn empirical_power(traces: &[EpisodeTrace], user: User) -> Result<f64> {
    if traces.is_empty() {
        return Err(invalid("power audit needs at least one episode"));
    }
    let total: f64 = traces.iter().map(|tr| tr.energy(user)).sum();
    Ok(total / traces.len() as f64)
}
