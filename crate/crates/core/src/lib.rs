//! Transcoder training and weights-based circuit analysis for small
//! decoder-only transformers.
//!
//! The crate covers the whole loop at desk scale:
//!
//! - [`model`]: a GPT-style transformer with activation caching and MLP
//!   replacement, plus [`lm`] for training it on a toy corpus.
//! - [`coder`] and [`trainer`]: transcoders and SAEs, activation harvesting,
//!   Adam training and lambda1 sweeps.
//! - [`attribution`]: factorized feature-to-feature attributions, attention
//!   OV pullbacks, LayerNorm linearization, de-embeddings and DLA.
//! - [`circuits`]: greedy computational-path search and path-to-graph
//!   merging with error nodes and DOT/JSON export.
//! - [`eval`]: L0, cross-entropy deltas, top activating examples and the
//!   greater-than probability-difference metrics.
//! - [`corpus`]: word-level vocabulary and deterministic synthetic corpora.
//! - [`service`]: JSON-over-HTTP access to all of the above.
//! - [`cli`]: the `tc` command line.

pub mod attribution;
pub mod checkpoint;
pub mod circuits;
pub mod cli;
pub mod coder;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod ops;
pub mod service;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use coder::{Coder, CoderKind, CoderOutput};
pub use error::{Error, Result};
pub use model::{forward_with_cache, run_with_replacements, ActivationCache, ModelConfig, ModelParams};
