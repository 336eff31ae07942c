//! De-identification of protected health information (PHI) in clinical text.
//!
//! The crate trains BiLSTM-CRF sequence labelers over stacked sub-word
//! embeddings, post-processes their output with regular-expression rules,
//! combines several labelers by weighted voting, and scores predictions with
//! span-level metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod corpusgen;
pub mod embeddings;
pub mod ensemble;
pub mod eval;
pub mod exec;
pub mod ingest;
pub mod linalg;
pub mod lstm;
pub mod postprocess;
pub mod tagger;

#[cfg(test)]
pub(crate) mod testutil;

/// Crate version recorded in artifact manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
