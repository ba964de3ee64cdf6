//! Label-free adaptation of precomputed cross-view embeddings.
//!
//! The pipeline consumes feature files produced by any frozen encoder,
//! trains a linear adapter with EM-style pseudo-labeling plus a
//! reconstruction consistency term, and evaluates retrieval quality
//! (Recall@K, mean AP) against a reference set whose records carry geo-tags.

#![warn(clippy::all)]

pub mod adapter;
pub mod aic;
pub mod empl;
mod error;
pub mod featstore;
pub mod inspect;
pub mod math;
pub mod retrieval;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
