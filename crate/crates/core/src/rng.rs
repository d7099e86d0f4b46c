//! Seeded, keyed random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! built from the master seed, a [`Domain`] tag and two indices (for example
//! episode number and channel direction). Two draws with different keys never
//! share a stream, so splitting work across threads cannot alias them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a substream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    TrainBits = 2,
    TrainNoise = 3,
    EvalBits = 4,
    EvalNoise = 5,
    Calibration = 6,
    Validation = 7,
    Polar = 8,
    Puncture = 9,
    Stub = 10,
    Restart = 11,
    ReverseNoise = 12,
    CalibrationNoise = 13,
    ValidationNoise = 14,
}

/// Build the substream keyed by `(master, domain, a, b)`.
pub fn substream(master: u64, domain: Domain, a: u64, b: u64) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
