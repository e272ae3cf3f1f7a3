//! Dual-path convolutional image-text embeddings.
//!
//! Two residual convolutional branches, one per modality, map images and
//! sentences into one feature space. Training couples the branches through
//! a classifier shared by both paths: every image/caption group is treated
//! as its own class (the instance objective), and a bidirectional hinge on
//! cosine similarity (the ranking objective) tightens cross-modal alignment
//! in a second stage. Everything runs on a small self-contained tape-based
//! autograd engine, so the whole pipeline is reproducible on a CPU at desk
//! scale.
//!
//! The `examples/` directory shows one runnable program per capability:
//! corpus generation, vocabulary building, two-stage training, retrieval
//! evaluation, loss-regime comparison, word probing and gradient checking.
//! The `dualpath` binary wraps the same entry points as subcommands.

pub mod autograd;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
