//! Layer-adaptive KV-cache compression.
//!
//! Dense-attention layers are kept on device as 1- or 2-bit group-quantized
//! caches; sparse-attention layers are offloaded to host memory and served by
//! critical-channel Top-K retrieval.

pub mod error;
pub mod harness;
pub mod identifier;
pub mod kv_model;
pub mod memsim;
pub mod quantizer;
pub mod retriever;

pub use error::{KvError, Result};
