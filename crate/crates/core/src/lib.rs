//! Transformer-based multi-turn utterance rewriter.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`numerics`]: a small dense-tensor engine with reverse-mode
//!   automatic differentiation (define-by-run tape, 64-bit floats).
//! - [`corpus`]: tokenization, vocabulary construction, dataset I/O and a
//!   synthetic multi-turn dialogue generator with gold coreference and
//!   omission annotations.
//! - [`model`]: the rewriter network — turn-aware Transformer encoder,
//!   split-attention decoder and four selectable output heads
//!   (generation, pointer, pointer-generator, gated pointer).
//! - [`training`]: Adam optimization, padded mini-batching and
//!   validation-driven checkpointing.
//! - [`decoding`]: greedy and beam-search generation with per-step gate
//!   and attention traces.
//! - [`metrics`]: BLEU / ROUGE / exact-match plus coreference and
//!   completion precision/recall/F1.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
