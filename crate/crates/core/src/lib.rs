//! Word-level autocompletion for computer-aided translation.
//!
//! A baseline word-prediction model places a `[MASK]` probe between the left
//! and right translation context and classifies it over the target
//! vocabulary. An energy model shares the same backbone but feeds each
//! candidate word into the probe slot and scores it with a sigmoid head.
//! Inference retrieves the top-K prefix-matching candidates with the
//! baseline and reranks them with the energy model.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod neural;
pub mod synthetic;
pub mod training;
pub mod trie;
pub mod vocab;

pub use error::{Result, WlacError};
