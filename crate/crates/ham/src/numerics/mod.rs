//! Dense-tensor engine with reverse-mode gradients.
//!
//! Everything is 64-bit and single-threaded. A [`Graph`] records the forward
//! pass; [`Graph::backward`] replays it in reverse and exposes per-node
//! gradients. Model parameters live outside the graph as [`Tensor`]s and are
//! re-registered on every forward pass.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckReport, ParamGradReport};
pub use graph::{Graph, Var};
pub use tensor::{NamedTensors, ParamEntry, Tensor};

/// Probabilities below this are clamped before taking a log.
pub const PROB_CLAMP: f64 = 1e-12;
