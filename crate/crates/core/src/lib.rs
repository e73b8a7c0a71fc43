//! Recursive visual explanation on a desk-scale vision-language model.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: dense tensors, reverse-mode autodiff, AdamW, gradient checking.
//! * [`text`]: word-level vocabulary, prompt/target formats, output parsing.
//! * [`scenegen`]: the synthetic grid-of-shapes VQA dataset with templated
//!   explanations.
//! * [`model`]: vision encoder, query transformer and frozen causal decoder,
//!   with greedy/beam generation and a binary checkpoint format.
//! * [`train`]: decoder pretraining and teacher-forced finetuning.
//! * [`revise`]: the recursive explanation loop, trace classification and
//!   attention heatmaps.
//! * [`selftrain`]: pseudo-label harvesting and query-transformer-only
//!   self-training.
//! * [`metrics`]: BLEU, ROUGE-L, CIDEr and the filtered-score report.

pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod revise;
pub mod scenegen;
pub mod selftrain;
pub mod text;
pub mod train;

pub use error::{Error, Result};
