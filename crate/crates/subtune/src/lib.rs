//! Selective-layer finetuning laboratory.
//!
//! The crate builds a small deterministic residual-MLP stack and, on top of
//! it, the machinery for studying *which* layers of a pretrained network are
//! worth finetuning:
//!
//! - [`nn`] — tensors, dense layers, residual blocks, softmax cross-entropy
//!   and exact manual backpropagation restricted to unfrozen parameters.
//! - [`model`] — the [`model::BlockNetwork`]: named blocks, freeze masks,
//!   heads (linear probe / subtune / siamese), snapshots and checkpoints.
//! - [`train`] — AdamW with cosine annealing, evaluation, stratified k-fold
//!   cross-validation and learning-rate sweeps.
//! - [`select`] — finetuning profiles, greedy subset selection, the
//!   norm-constrained trainer and the generalization-gap experiment.
//! - [`prune`] — channel-wise structured pruning of the tuned blocks.
//! - [`active`] — pool-based active learning with margin-based acquisition.
//! - [`cost`] — the fork/merge multi-task inference-time model plus an
//!   event-driven pipeline simulator used as its oracle.
//! - [`data`] — synthetic transfer/shift tasks, vector corruption analogs,
//!   subsampling and CSV loading.
//!
//! Everything is seeded and deterministic: the same inputs and seeds produce
//! bit-identical results, which the test suites rely on.

pub mod active;
pub mod cost;
pub mod data;
mod error;
pub mod model;
pub mod nn;
pub mod prune;
pub mod select;
pub mod train;
pub mod util;

pub use error::{Error, Result};
