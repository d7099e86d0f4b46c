//! Monte Carlo evaluation and experiment orchestration.

pub mod coders;
pub mod eval;
pub mod experiment;
pub mod stats;

pub use coders::{LearnedCoder, OneWayPair, PolarCoder, StubCoder, StubKind, SubBlockCoder};
pub use eval::{evaluate, evaluate_grid, ood_sweep, BlerPoint, BlerReport, EvalConfig};
pub use experiment::{run_experiment, Comparison, ExperimentConfig, ExperimentOutput};
pub use stats::{wilson, Tally, Z95};
