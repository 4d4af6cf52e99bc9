//! Entity-based claim extraction for medical social-media posts.
//!
//! The pipeline recognizes medical entities, optionally normalizes them to
//! canonical concept names, builds claim candidates from entity pairs,
//! picks a main claim per post and checks it against evidence with a
//! pluggable verifier. Evaluation helpers cover span-level NER scoring,
//! verdict metrics with NEI abstention and prediction-shift analysis.

pub mod analysis;
pub mod claimgen;
pub mod corpus;
pub mod error;
pub mod linker;
pub mod ner;
pub mod pipeline;
pub mod protocol;
pub mod select;
pub mod tables;
pub mod text;
pub mod verdict;

pub use error::{Error, Result};
