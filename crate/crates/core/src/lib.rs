//! Structured long-prompt optimization: prompt trees, critic/actor edits,
//! and bandit-guided beam search.

pub mod actions;
pub mod actor;
pub mod critic;
pub mod eval;
pub mod gateway;
pub mod harness;
pub mod search;
pub mod templates;
pub mod tree;
