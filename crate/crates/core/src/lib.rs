//! Continual post-training of a small masked language model through
//! task-masked adapter plugins.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense f64 tensors, a define-by-run tape, gradient-mask hooks and Adam.
//! - [`clplugin`]: the two-layer masked adapter, soft/hard task masks, mask accumulation.
//! - [`model`]: a tiny post-layer-norm transformer backbone with plugin insertion points and heads.
//! - [`data`]: vocabulary, tokenizer, synthetic domains, MLM masking and few-shot sampling.
//! - [`continual`]: the post-train / fine-tune lifecycle, variants and checkpoints.
//! - [`eval`]: accuracy, macro-F1, forgetting rate and reports.

pub mod autodiff;
pub mod clplugin;
pub mod continual;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
