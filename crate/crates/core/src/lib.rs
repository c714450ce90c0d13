//! Knowledge-seed prompting for medical multiple-choice QA.
//!
//! The pipeline annotates a corpus with entities, builds a weighted
//! co-occurrence graph from the training split, mines knowledge seeds for each
//! test question, composes prompts and scores model responses.

pub mod cli;
pub mod corpus;
pub mod entity;
pub mod eval;
pub mod graph;
pub mod llm;
pub mod metrics;
mod par;
pub mod prompt;
pub mod seeds;
pub mod text;

/// Group key used when an instance lacks the requested metadata field.
pub const UNKNOWN_GROUP: &str = "unknown";
