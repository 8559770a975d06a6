//! Attention-guided explanation generation for synthetic driving clips.
//!
//! The crate builds a small, fully deterministic pipeline:
//!
//! 1. [`scene`] synthesizes short driving clips (PNG frames plus JSON
//!    annotations) with rule-derived actions and templated explanations.
//! 2. [`attn_gen`] trains an object-significance scorer whose attention
//!    weights are supervised by detection/ground-truth IoU overlap and the
//!    clip action label.
//! 3. [`vlm`] is a miniature vision-language model: patch encoder, querying
//!    transformer whose cross-attention can be masked down to significant
//!    patches, and a causal text decoder conditioned on concatenated
//!    per-frame visual tokens.
//! 4. [`metrics`] scores generated explanations (BLEU-4, ROUGE-L, CIDEr, a
//!    slot-matching semantic score, and top-k significance accuracy).
//!
//! Everything runs on CPU via [`ndarray`] with a small tape-based autodiff
//! in [`autodiff`]. All randomness is seeded; identical inputs give
//! byte-identical datasets, checkpoints, and reports.

pub mod attn_gen;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod font;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod seeding;
pub mod training;
pub mod viz;
pub mod vlm;

pub use error::{Error, Result};
