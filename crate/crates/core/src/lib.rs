//! Knowledge-augmented CTR recommendation: language-model reasoning,
//! reflection and refinement turned into training data, inference-time
//! knowledge, dense embeddings and a fused click-through-rate model.

pub mod builder;
pub mod context;
pub mod ctr;
pub mod encoder;
pub mod error;
pub mod gateway;
pub mod hashing;
pub mod inference;
pub mod ingest;
pub mod jsonl;
pub mod sft;

pub use error::{Error, Result};
