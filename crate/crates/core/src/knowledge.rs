//! Knowledge vectors and bit bookkeeping.
//!
//! A transmit-side knowledge vector holds a user's message bits, the symbols
//! it has already sent and the (possibly residual) symbols it has received:
//!
//! ```text
//! [ b_1 .. b_M | c^1 .. c^{t-1} 0 .. 0 | y^1 .. y^{t-1} 0 .. 0 ]
//! ```
//!
//! Each history segment has `T - 1` slots because the final channel use
//! produces no update. Receive-side vectors are `[b | y^1..y^T | c^1..c^T]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// What a user stores as its received history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Store `y` as received.
    #[default]
    Raw,
    /// Store `y - c`, the received symbol minus the user's own sent symbol.
    Residual,
}

impl FeedbackMode {
    pub fn apply(self, received: f64, sent: f64) -> f64 {
        match self {
            FeedbackMode::Raw => received,
            FeedbackMode::Residual => received - sent,
        }
    }
}

fn check_bits(bits: &[u8]) -> Result<()> {
    if bits.is_empty() {
        return Err(invalid("message must hold at least one bit"));
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(invalid(format!("bit values must be 0 or 1, found {b}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeVector {
    bits: Vec<u8>,
    sent: Vec<f64>,
    recv: Vec<f64>,
    filled: usize,
}

impl KnowledgeVector {
    /// Fresh vector at the first channel use: bits followed by zero padding.
    pub fn new(bits: &[u8], uses: usize) -> Result<Self> {
        check_bits(bits)?;
        if uses == 0 {
            return Err(invalid("a block needs at least one channel use"));
        }
        Ok(Self {
            bits: bits.to_vec(),
            sent: vec![0.0; uses - 1],
            recv: vec![0.0; uses - 1],
            filled: 0,
        })
    }

    /// Records the symbol sent and received at the current channel use.
    pub fn update(&self, sent: f64, received: f64, mode: FeedbackMode) -> Result<Self> {
        if self.filled >= self.sent.len() {
            return Err(invalid(format!(
                "knowledge vector already holds {} updates; the last channel use is not recorded",
                self.filled
            )));
        }
        let mut next = self.clone();
        next.sent[self.filled] = sent;
        next.recv[self.filled] = mode.apply(received, sent);
        next.filled += 1;
        Ok(next)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn sent_history(&self) -> &[f64] {
        &self.sent
    }

    pub fn recv_history(&self) -> &[f64] {
        &self.recv
    }

    /// Number of channel uses already recorded (`t - 1`).
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn len(&self) -> usize {
        self.bits.len() + self.sent.len() + self.recv.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.bits.iter().map(|&b| f64::from(b)));
        out.extend_from_slice(&self.sent);
        out.extend_from_slice(&self.recv);
        out
    }
}

/// Free-function form of [`KnowledgeVector::new`].
pub fn init_knowledge(bits: &[u8], uses: usize) -> Result<KnowledgeVector> {
    KnowledgeVector::new(bits, uses)
}

/// Free-function form of [`KnowledgeVector::update`].
pub fn update_knowledge(q: &KnowledgeVector, sent: f64, received: f64, mode: FeedbackMode) -> Result<KnowledgeVector> {
    q.update(sent, received, mode)
}

/// Decoder input `[b | y | c]` formed after the last channel use.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceiveVector {
    pub bits: Vec<u8>,
    pub received: Vec<f64>,
    pub sent: Vec<f64>,
}

impl ReceiveVector {
    pub fn len(&self) -> usize {
        self.bits.len() + self.received.len() + self.sent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.bits.iter().map(|&b| f64::from(b)));
        out.extend_from_slice(&self.received);
        out.extend_from_slice(&self.sent);
        out
    }
}

pub fn build_receive_vector(bits: &[u8], received: &[f64], sent: &[f64]) -> Result<ReceiveVector> {
    check_bits(bits)?;
    if received.len() != sent.len() {
        return Err(invalid(format!(
            "received ({}) and sent ({}) histories differ in length",
            received.len(),
            sent.len()
        )));
    }
    if received.is_empty() {
        return Err(invalid("receive vector needs at least one channel use"));
    }
    Ok(ReceiveVector {
        bits: bits.to_vec(),
        received: received.to_vec(),
        sent: sent.to_vec(),
    })
}

/// Big-endian value of a bit string: `bits[0]` is the most significant bit.
pub fn bits_to_index(bits: &[u8]) -> Result<usize> {
    check_bits(bits)?;
    if bits.len() >= usize::BITS as usize {
        return Err(invalid(format!("{} bits do not fit an index", bits.len())));
    }
    Ok(bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize))
}

/// Inverse of [`bits_to_index`].
pub fn index_to_bits(index: usize, m: usize) -> Result<Vec<u8>> {
    if m == 0 || m >= usize::BITS as usize {
        return Err(invalid(format!("bit width {m} out of range")));
    }
    if index >> m != 0 {
        return Err(invalid(format!("index {index} does not fit in {m} bits")));
    }
    Ok((0..m).map(|i| ((index >> (m - 1 - i)) & 1) as u8).collect())
}

/// Splits a length-`K` message into `K / M` consecutive length-`M` blocks.
pub fn split_subblocks(bits: &[u8], m: usize) -> Result<Vec<Vec<u8>>> {
    check_bits(bits)?;
    if m == 0 || !bits.len().is_multiple_of(m) {
        return Err(invalid(format!(
            "sub-block length {m} does not divide message length {}",
            bits.len()
        )));
    }
    Ok(bits.chunks(m).map(<[u8]>::to_vec).collect())
}

pub fn merge_subblocks(blocks: &[Vec<u8>]) -> Vec<u8> {
    blocks.concat()
}
