//! Prompt optimization by segment-level attribution and bandit-selected edits.

pub mod attributor;
pub mod backends;
pub mod corpus;
pub mod eval;
pub mod optimizer;
pub mod segmenter;
pub mod selector;
