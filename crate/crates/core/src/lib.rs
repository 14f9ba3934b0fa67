//! Corpus curation and evaluation toolkit for domain-tuned instruction models.
//!
//! The curation side filters large open text corpora down to a domain corpus
//! in two stages: a multi-pattern keyword pass driven by a glossary, then an
//! embedding-similarity pass against a deduplicated reference knowledge base.
//! The evaluation side builds question/answer data with a remote LLM, judges
//! model answers by embedding similarity, and runs the statistics used to
//! compare a tuned model against its base.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod glossary;
pub mod http;
pub mod ingest;
pub mod meta;
pub mod pipeline;
pub mod qagen;
pub mod refkb;
pub mod service;
pub mod text;

pub use error::{Error, Result};

/// Tool version stamped into output metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
