//! Document-level zero-shot relation extraction driven by entity side
//! information.
//!
//! The pipeline runs in stages:
//!
//! 1. [`corpus`] loads DocRED/MEN-style documents.
//! 2. [`sideinfo`] asks a chat model for a description and a hypernym of each
//!    entity and stores them in a replayable JSONL cache.
//! 3. [`embedding`] renders pair prompts and encodes every text.
//! 4. [`scoring`] compares pair embeddings with relation-label embeddings and
//!    picks the best candidate with the dynamic weighted score.
//! 5. [`zseval`] samples unseen label sets and reports macro F1, variance and
//!    sentence-gap breakdowns.

pub mod corpus;
pub mod pipeline;
pub mod embedding;
mod http;
pub mod scoring;
pub mod sideinfo;
pub mod synthetic;
pub mod zseval;

pub use http::RetryPolicy;
