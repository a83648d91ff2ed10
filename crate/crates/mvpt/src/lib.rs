//! Self-contained music/video cross-modal retrieval: dual Transformer
//! towers trained with a bidirectional contrastive objective over segment
//! sequences of precomputed features, plus the evaluation, analysis, and
//! conditioning tooling around them.
//!
//! Modules, bottom up:
//!
//! - [`tensor`] — dense f32/f64 tensors with reverse-mode autodiff on a tape
//! - [`dataio`] — feature files, segment pooling, synthetic paired data,
//!   music-region detection
//! - [`model`] — the two Transformer encoders, the MLP baseline, attention
//!   rollout, and checkpoint I/O
//! - [`objective`] — cosine similarity, bidirectional InfoNCE, triplet loss
//! - [`trainer`] — windowing, AdamW, cosine schedule, the training loop
//! - [`evalkit`] — retrieval metrics and the analysis protocols
//! - [`conditioning`] — attribute vectors and embedding arithmetic
//! - [`cli`] — the `mvpt` command-line entry point

pub mod cli;
pub mod conditioning;
pub mod dataio;
pub mod evalkit;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tape, Tensor};
