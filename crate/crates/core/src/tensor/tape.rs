//! Gradient tape: operation recording and reverse-mode accumulation.

use super::{Result, Tensor, TensorError};

/// Handle to a recorded tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Maps the upstream gradient of a node's output to gradient contributions
/// for each of its recorded inputs (same order as `Node::inputs`).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    inputs: Vec<NodeId>,
    /// `None` marks a leaf (watched tensor).
    backward: Option<BackwardFn>,
}

/// Append-only record of one differentiable pass.
///
/// Nodes are stored in creation order, which is already a topological order:
/// every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a differentiable leaf of this tape.
    ///
    /// The returned tensor shares the input's buffer; gradients accumulate
    /// under its node id during [`Tape::backward`].
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
        });
        t.detached().with_node(id, true)
    }

    pub(crate) fn record(&mut self, inputs: Vec<NodeId>, backward: BackwardFn) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            inputs,
            backward: Some(backward),
        });
        id
    }

    /// Reverse pass from a scalar loss. Returns gradients for every leaf
    /// reachable from the loss; intermediate gradients are discarded as soon
    /// as they have been propagated.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let root = loss.node().ok_or(TensorError::InvalidArg {
            op: "backward",
            msg: "loss is not recorded on this tape".to_string(),
        })?;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.backward {
                Some(back) => {
                    let contributions = back(&grad);
                    debug_assert_eq!(contributions.len(), node.inputs.len());
                    for (input, contrib) in node.inputs.iter().zip(contributions) {
                        match &mut grads[input.0] {
                            Some(acc) => {
                                debug_assert_eq!(acc.len(), contrib.len());
                                for (a, c) in acc.iter_mut().zip(&contrib) {
                                    *a += c;
                                }
                            }
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
                // Leaf: keep its accumulated gradient for the caller.
                None => grads[idx] = Some(grad),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass: per-leaf gradients addressed by tensor.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t` (a watched leaf). `None` when
    /// the leaf is unreachable from the loss or `t` is not on the tape.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node()?;
        self.grads.get(id.0)?.as_deref()
    }

    /// Like [`Gradients::get`] but substitutes zeros for unreachable leaves.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
