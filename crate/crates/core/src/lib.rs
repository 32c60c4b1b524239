//! Layer-wise usable information (LI) for language models.
//!
//! LI measures, at every transformer layer, how much a context lowers the
//! per-token entropy of a question span when each layer's hidden states are
//! read out through the model's output head. Summed across layers it is a
//! training-free score for separating answerable from unanswerable questions.
//!
//! The crate is organised as:
//! - [`model`]: uniform access to causal LMs with per-layer head projection
//! - [`desk`]: a tiny deterministic model plus brute-force recomputation
//! - [`li`]: per-layer entropies, information gains and aggregates
//! - [`prompts`] / [`datasets`]: corpus loading and two-pass rendering
//! - [`baselines`]: P(True), entropy and semantic-entropy scorers
//! - [`metrics`]: AUROC, rejection analysis, calibration and ECE
//! - [`experiment`]: config-driven runs, caching, reports and figures

pub mod baselines;
pub mod datasets;
pub mod desk;
mod error;
pub mod experiment;
pub mod li;
pub mod metrics;
pub mod model;
pub mod prompts;

pub use error::{Error, Result};
