//! Minimal reverse-mode differentiation engine and the layers the coders use.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{Activation, Dense, LayerNorm, MultiHeadAttention, TransformerLayer};
pub use optim::{Adam, LrSchedule};
pub use params::{Bound, Param, ParamId, ParameterSet};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
