//! Lossless self-drafting speculative decoding for ultra-long sequence
//! generation.
//!
//! The pipeline per iteration:
//!
//! 1. The target model runs once over a budgeted *partial* KV cache and
//!    produces `γ + 1` logit vectors from its last hidden state through a
//!    chain of residual draft heads ([`model::draft_heads`]).
//! 2. Per-head top candidates form a trie, extended with frequent n-grams
//!    recalled from the generated text ([`ngram`], [`tree`]).
//! 3. The whole trie is verified in one forward pass over the *full* cache
//!    with an ancestor-only attention mask. A target token is sampled at
//!    every node with position-keyed randomness ([`sampling`]) and draft
//!    tokens are accepted by exact match.
//! 4. The partial cache is refreshed from importance scores whenever the
//!    generated text has outgrown its body ([`kvcache`]).
//!
//! Because sampling deviates are keyed by absolute position, the output of
//! [`engine::generate`] equals plain autoregressive decoding
//! ([`engine::generate_ar`]) token for token.

pub mod cli;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod sampling;
pub mod tree;

pub use error::{Error, Result};

/// Vocabulary index.
pub type TokenId = u32;
