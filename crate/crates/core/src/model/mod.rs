//! The UFC-MIL network.
//!
//! Per resolution, raw patch features pass through a self-attention block
//! with a learnable class token, neighbor aggregation over the patch grid,
//! and a shared two-layer reduction head that maps both the class token (the
//! aggregated bag prediction) and every patch row (instance predictions) to
//! class probabilities. Instance entropy drives a relaxed binary mask; at
//! each finer resolution, masked coarse features replace their children's
//! attended features before a cross-attention pass, steering capacity toward
//! regions the coarser level found uncertain.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    attention_block, cross_attention, entropy_map, forward_bag, forward_features, fuse_features,
    gumbel_mask, reduce_head, tnam_aggregate, tnam_weights, ForwardMode, ForwardOutput,
    LevelOutput, MaskKind,
};
pub use params::{AttnParams, HeadParams, LevelParams, TnamParams, UfcMilParams};

use crate::tensor::TensorError;

/// Binary classification throughout.
pub const NUM_CLASSES: usize = 2;

/// Architecture and mask hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Feature dimension d.
    pub feature_dim: usize,
    /// Number of resolution levels R.
    pub levels: usize,
    /// Hidden width of the reduction head.
    pub hidden: usize,
    pub dropout_p: f64,
    /// Gumbel-softmax temperature τ.
    pub tau: f64,
    /// Scale of the Gumbel noise.
    pub gumbel_scale: f64,
    pub mask_threshold: f64,
    pub attention_heads: usize,
    /// Evaluation uses noise-free (g = 0) masks when set.
    pub eval_deterministic_mask: bool,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, levels: usize) -> Self {
        Self {
            feature_dim,
            levels,
            hidden: (feature_dim / 2).max(4),
            dropout_p: 0.5,
            tau: 1.0,
            gumbel_scale: 0.2,
            mask_threshold: 0.5,
            attention_heads: 1,
            eval_deterministic_mask: true,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let fail = |msg: String| {
            Err(TensorError::InvalidArg {
                op: "model_config",
                msg,
            })
        };
        if self.feature_dim == 0 || self.levels == 0 || self.hidden == 0 {
            return fail("feature_dim, levels, and hidden must be >= 1".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(0.0 < self.mask_threshold && self.mask_threshold < 1.0) {
            return fail(format!(
                "mask_threshold {} outside (0, 1)",
                self.mask_threshold
            ));
        }
        if self.gumbel_scale < 0.0 {
            return fail(format!("gumbel_scale {} must be >= 0", self.gumbel_scale));
        }
        if self.attention_heads == 0 || self.feature_dim % self.attention_heads != 0 {
            return fail(format!(
                "attention_heads {} must divide feature_dim {}",
                self.attention_heads, self.feature_dim
            ));
        }
        Ok(())
    }
}
