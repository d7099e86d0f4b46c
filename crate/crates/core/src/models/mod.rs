//! Learned feedback coders: LightCode variants and the block attention code.

pub mod nets;
pub mod power;
pub mod spec;
pub mod system;

pub use nets::{BafNet, LcNet, Net};
pub use power::{Mode, PowerReallocator, UseStats};
pub use spec::{ModelKind, ModelSpec};
pub use system::{Decisions, EpisodeBatch, EpisodeGraph, TwoWaySystem, UserCoder};
