//! Knowledge-bridge graph network for answer ranking in visual dialogue.
//!
//! The crate carries its own reverse-mode autodiff kernel, the model
//! components, and a harness for synthetic data, training, evaluation,
//! tracing and ablations.

pub mod cross_bridge;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod intra_graph;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod retrieval;

pub use error::{Error, Result};
pub use model::{Ablation, EncodedEpisode, Kbgn, ModelConfig};
