//! Training objectives: cross-entropy on the aggregated prediction, the
//! patch-wise bag-consistency loss, and the joint objective summed over
//! resolutions.

use crate::model::{ForwardOutput, NUM_CLASSES};
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Margin and class count for the patch-wise loss.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Margin δ in (0, 0.5): negative bags must keep every instance's
    /// positive probability at or below δ; positive bags need at least one
    /// instance at or above 1 − δ.
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { delta: 0.49 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta > 0.0 && self.delta < 0.5 {
            Ok(())
        } else {
            Err(TensorError::InvalidArg {
                op: "loss_config",
                msg: format!("delta {} outside (0, 0.5)", self.delta),
            })
        }
    }
}

/// Which targets drive an epoch.
#[derive(Debug, Clone)]
pub enum LossPhase {
    /// Joint objective: CE against the hard bag label plus the patch-wise
    /// term, summed over resolutions.
    Main { label: u8 },
    /// Calibration: CE only, against one smoothed target per resolution.
    Calibration { targets: Vec<[f64; 2]> },
}

/// One-hot target distribution for a binary label.
pub fn one_hot(label: u8) -> [f64; 2] {
    match label {
        0 => [1.0, 0.0],
        _ => [0.0, 1.0],
    }
}

/// Cross-entropy `-Σ_c target[c] · ln p[c]` of a 1×C probability row
/// against a fixed target distribution.
pub fn ce_loss(tape: &mut Tape, p: &Tensor, target: &[f64]) -> Result<Tensor> {
    if p.rows() != 1 || p.cols() != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "ce_loss",
            lhs: p.shape().to_vec(),
            rhs: vec![1, target.len()],
        });
    }
    let sum: f64 = target.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || target.iter().any(|&t| t < 0.0) {
        return Err(TensorError::InvalidArg {
            op: "ce_loss",
            msg: format!("target {target:?} is not a distribution"),
        });
    }
    let target = Tensor::raw(vec![1, target.len()], target.to_vec());
    let logs = tape.log(p)?;
    let weighted = tape.mul(&target, &logs)?;
    let total = tape.sum_axis(&weighted, 1)?;
    tape.scale(&total, -1.0)
}

/// Patch-wise loss over instance predictions (n×C) for bag label `y`:
///
/// - `y = 0`: `(1/n) Σ_n relu(p_n[1] − δ)` — every instance must stay below
///   the margin, without exception.
/// - `y = 1`: `relu(−max_n p_n[1] + (1 − δ))` — at least one instance must
///   clear it. The max subgradient routes to the lowest-index maximizer.
pub fn pw_loss(tape: &mut Tape, p_inst: &Tensor, y: u8, delta: f64) -> Result<Tensor> {
    let n = p_inst.rows();
    if n == 0 {
        return Err(TensorError::InvalidArg {
            op: "pw_loss",
            msg: "empty instance set".to_string(),
        });
    }
    // Column 1 (the positive class) via a fixed selector.
    let selector = Tensor::raw(vec![NUM_CLASSES, 1], vec![0.0, 1.0]);
    let p_pos = tape.matmul(p_inst, &selector)?;
    if y == 0 {
        let shifted = tape.add_scalar(&p_pos, -delta)?;
        let hinge = tape.relu(&shifted)?;
        tape.mean_axis(&hinge, 0)
    } else {
        let best = tape.max_axis(&p_pos, 0)?;
        let neg = tape.scale(&best, -1.0)?;
        let gap = tape.add_scalar(&neg, 1.0 - delta)?;
        tape.relu(&gap)
    }
}

/// Joint objective over all resolutions: `Σ_r (CE_r + PW_r)` in the main
/// phase, `Σ_r CE_r` against smoothed targets in the calibration phase.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &ForwardOutput,
    phase: &LossPhase,
    delta: f64,
) -> Result<Tensor> {
    if outputs.levels.is_empty() {
        return Err(TensorError::InvalidArg {
            op: "total_loss",
            msg: "no resolution outputs".to_string(),
        });
    }
    let mut total: Option<Tensor> = None;
    for (r, level) in outputs.levels.iter().enumerate() {
        let term = match phase {
            LossPhase::Main { label } => {
                let ce = ce_loss(tape, &level.p_agg, &one_hot(*label))?;
                let pw = pw_loss(tape, &level.p_inst, *label, delta)?;
                tape.add(&ce, &pw)?
            }
            LossPhase::Calibration { targets } => {
                let target = targets.get(r).ok_or(TensorError::InvalidArg {
                    op: "total_loss",
                    msg: format!("missing smoothed target for resolution {r}"),
                })?;
                ce_loss(tape, &level.p_agg, target)?
            }
        };
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}
