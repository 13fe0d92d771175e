//! Relevance-aware embedding-based retrieval workbench.
//!
//! The crate covers the offline side of a product-search retrieval model:
//! engagement labels and their reward-model revision ([`labeling`]), a
//! relevance reward model ([`rrm`]), a Siamese hashed-token dual encoder
//! ([`encoder`]), multi-objective listwise training with stratified sampling
//! and in-batch negatives ([`training`]), typo augmentation ([`augment`]),
//! guardrailed hard-negative and semi-positive mining ([`mining`]), and exact
//! top-K evaluation ([`evalkit`]). [`synthgen`] builds synthetic worlds with
//! known ground truth and [`pipeline`] wires everything into runnable
//! experiments.

pub mod augment;
pub mod catalog;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod labeling;
pub mod mining;
pub mod pipeline;
pub mod rng;
pub mod rrm;
pub mod synthgen;
pub mod text;
pub mod training;

pub use error::{Error, Result};
