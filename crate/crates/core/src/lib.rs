//! UFC-MIL: uncertainty-focused calibrated multiple-instance learning over
//! multi-resolution patch features.
//!
//! The crate provides, bottom-up:
//!
//! - [`tensor`]: a dense f64 tensor engine with reverse-mode autodiff,
//!   sized for the forward/backward passes this model needs.
//! - [`bagdata`]: the multi-resolution bag data model, binary feature-file
//!   and manifest I/O, grid adjacency, quadtree indexing, and a synthetic
//!   planted-lesion generator for end-to-end verification.
//! - [`model`]: the network itself — per-resolution self-attention with a
//!   class token, topological neighbor aggregation, patch-entropy masking,
//!   uncertainty-gated cross-resolution fusion, and the shared reduction
//!   head.
//! - [`losses`]: cross-entropy, the patch-wise bag-consistency loss, and
//!   the joint objective.
//! - [`calibrate`]: sample- and resolution-wise label smoothing plus
//!   temperature-scaling and uniform-smoothing baselines.
//! - [`metrics`]: ECE, reliability bins, recall@k%, AUC, accuracy, and
//!   report assembly.
//! - [`train`]: Adam with cosine annealing, the two-phase training loop,
//!   and the end-to-end gradient checker.

pub mod bagdata;
pub mod calibrate;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub(crate) mod util;

pub use tensor::{Tape, Tensor, TensorError};
