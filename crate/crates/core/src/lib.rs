//! Ranks long-context instruction samples by how much they depend on distant
//! context, then writes the selected subset as a training set.
//!
//! Stages:
//! 1. `score` queries a short-window model A and a long-window model B
//!    (through [`gateway::ScoringBackend`]) and appends raw NLLs and attention
//!    means to a resumable [`cache::ScoreCache`].
//! 2. `select` normalizes the cached values, combines the perplexity-gap
//!    score ([`hmg`]) with the attention/importance agreement score ([`cam`])
//!    and writes a [`ranker::SelectionManifest`].
//! 3. `emit` mixes the selected long samples with short ones.

pub mod cache;
pub mod cam;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod hmg;
pub mod pipeline;
pub mod ranker;

pub use config::{BackendSpec, RunConfig};
pub use error::{Error, Result};
pub use ranker::ScoreMode;
