//! Reverse-mode differentiation, the toy model built on it, and training.

pub mod model;
pub mod tape;
pub mod train;

pub use model::{finite_diff, forward, grad, loss, Batch, LayerParams, ModelConfig};
pub use tape::{SeqShape, Tape, TapeError, Var};
pub use train::{train, OptimConfig, TrainOutcome};
