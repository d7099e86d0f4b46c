use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::knowledge::FeedbackMode;

/// Which coding architecture a system runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Two-way LightCode: both users encode and decode.
    Twlc,
    /// One-way LightCode with an active (learned) feedback encoder at user 2.
    Alc,
    /// One-way LightCode with passive feedback: user 2 echoes what it receives.
    Lc,
    /// Two-way block attention feedback code.
    Twbaf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Twlc => "twlc",
            ModelKind::Alc => "alc",
            ModelKind::Lc => "lc",
            ModelKind::Twbaf => "twbaf",
        }
    }

    /// Only user 1 carries a message.
    pub fn is_one_way(self) -> bool {
        matches!(self, ModelKind::Alc | ModelKind::Lc)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of one coder.
///
/// `bits` is the sub-block length `M`, `uses` the channel uses per sub-block
/// `T_M`, and `tokens` the number of sub-blocks coded jointly in one episode
/// (`K / M` for TWBAF, 1 for the LightCode family, whose sub-blocks run as
/// separate episodes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub bits: usize,
    pub uses: usize,
    #[serde(default = "one")]
    pub tokens: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub enc_layers: usize,
    #[serde(default)]
    pub dec_layers: usize,
    #[serde(default)]
    pub feedback: FeedbackMode,
    #[serde(default = "unit_power")]
    pub power: f64,
}

fn one() -> usize {
    1
}

fn unit_power() -> f64 {
    1.0
}

pub const MAX_BITS: usize = 12;

impl ModelSpec {
    /// TWLC at the hidden width used in the experiments (`h_c = 32`).
    pub fn twlc(bits: usize, uses: usize) -> Self {
        Self {
            kind: ModelKind::Twlc,
            bits,
            uses,
            tokens: 1,
            hidden: 32,
            head_hidden: 16,
            heads: 1,
            enc_layers: 0,
            dec_layers: 0,
            feedback: FeedbackMode::Raw,
            power: 1.0,
        }
    }

    /// Active-feedback LightCode; widths default to those of TWLC.
    pub fn alc(bits: usize, uses: usize) -> Self {
        Self {
            kind: ModelKind::Alc,
            ..Self::twlc(bits, uses)
        }
    }

    /// Passive-feedback LightCode.
    pub fn lc(bits: usize, uses: usize) -> Self {
        Self {
            kind: ModelKind::Lc,
            ..Self::alc(bits, uses)
        }
    }

    /// TWBAF with `h_b = 32`, two encoder and three decoder attention layers.
    pub fn twbaf(bits: usize, uses: usize, tokens: usize) -> Self {
        Self {
            kind: ModelKind::Twbaf,
            bits,
            uses,
            tokens,
            hidden: 32,
            head_hidden: 32,
            heads: 1,
            enc_layers: 2,
            dec_layers: 3,
            feedback: FeedbackMode::Raw,
            power: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(invalid(format!("sub-block length must be in 1..={MAX_BITS}, got {}", self.bits)));
        }
        if self.uses == 0 {
            return Err(invalid("a sub-block needs at least one channel use"));
        }
        if self.tokens == 0 {
            return Err(invalid("tokens must be at least 1"));
        }
        if self.kind != ModelKind::Twbaf && self.tokens != 1 {
            return Err(invalid("LightCode-family coders run one sub-block per episode"));
        }
        if self.hidden == 0 || self.head_hidden == 0 {
            return Err(invalid("hidden widths must be positive"));
        }
        if self.kind == ModelKind::Twbaf && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads)) {
            return Err(invalid(format!(
                "model dim {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(invalid("power must be positive"));
        }
        Ok(())
    }

    /// Length of a transmit-side knowledge vector, `M + 2 (T_M - 1)`.
    pub fn encoder_input_dim(&self) -> usize {
        self.bits + 2 * (self.uses - 1)
    }

    /// Decoder feature width: `[b, y, c]`, or `[y, c]` for one-way coders.
    pub fn decoder_input_dim(&self) -> usize {
        if self.kind.is_one_way() {
            2 * self.uses
        } else {
            self.bits + 2 * self.uses
        }
    }

    pub fn classes(&self) -> usize {
        1 << self.bits
    }

    /// Message bits per user per episode.
    pub fn message_bits(&self) -> usize {
        self.bits * self.tokens
    }

    /// Channel uses per episode.
    pub fn episode_uses(&self) -> usize {
        self.uses * self.tokens
    }
}
