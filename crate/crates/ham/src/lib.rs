//! Inference of personal attributes (profession, gender, age category,
//! family status) from a speaker's conversational utterances.
//!
//! The crate provides:
//! - a minimal f64 tensor engine with reverse-mode gradients ([`numerics`]),
//! - frozen pretrained word embedding loading ([`embeddings`]),
//! - corpus preparation, pattern-based distant labeling, and balanced
//!   batching ([`corpus`]),
//! - the attribute ranking models and their baselines ([`models`]),
//! - ranking metrics and significance tests ([`eval`]),
//! - attention-weight and top-term reports ([`explain`]).

pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod explain;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
