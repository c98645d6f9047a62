//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! All arithmetic is 64-bit: the gradient checks this crate relies on
//! (central finite differences at 1e-4 relative tolerance) are not
//! trustworthy in 32-bit. Values are validated for finiteness after every
//! forward op and after backward; NaN/Inf is a hard error.
//!
//! The [`Tape`] is define-by-run: a fresh tape is built for every forward
//! pass and replayed in reverse by [`Tape::backward`]. A tape and the
//! tensors it owns are single-threaded; plain [`Tensor`] values without a
//! tape are safe to share read-only across threads.

mod tape;
mod tensor;


pub use tape::{Mask, Tape, TensorId};
pub use tensor::Tensor;

/// Epsilon used inside layer normalization denominators.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floor applied inside `log_clamped` when computing log-likelihoods.
pub const LOG_FLOOR: f64 = 1e-12;

/// Additive constant for masked attention logits, applied before the
/// softmax; masked entries are zeroed exactly afterwards.
pub const MASK_FILL: f64 = -1e9;
