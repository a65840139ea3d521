//! Tool planning with a graph-tokenized autoregressive policy.
//!
//! Tools of a directed dependency graph become atomic vocabulary tokens.
//! A small causal transformer is trained to ground subtasks to tool tokens,
//! to recover each tool's successors from its hidden state, to map queries
//! to tool sequences, and finally against a frozen teacher that sees the
//! reference solution, on trajectories sampled from the student itself.

pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{DirectedPath, PathSamplerConfig, ToolGraph, ToolId, ToolSpec};
pub use vocab::{TokenId, ToolVocabulary};
