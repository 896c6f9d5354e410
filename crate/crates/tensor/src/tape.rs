use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` returns one entry per input. Entries for inputs whose
/// [`BackwardContext::needs_grad`] is false may be `None`.
pub trait Operation {
    fn name(&self) -> &'static str;

    fn backward(&self, ctx: &BackwardContext<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

/// Values visible to an [`Operation`] during the backward sweep.
pub struct BackwardContext<'a> {
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
    output: &'a Tensor,
}

impl<'a> BackwardContext<'a> {
    pub fn input(&self, i: usize) -> &'a Tensor {
        self.inputs[i]
    }

    pub fn output(&self) -> &'a Tensor {
        self.output
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Operation>>,
}

/// Single-use record of the forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape supports exactly one call to [`Tape::backward`].
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Records a leaf that accumulates a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true)
    }

    /// Records a leaf that never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false)
    }

    /// Copies `v` into a new constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let value = self.nodes[v.id].value.clone();
        Ok(self.constant(value))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::DetachedTape);
        }
        Ok(())
    }

    /// Value of a recorded node.
    ///
    /// # Panics
    ///
    /// Panics if `v` was produced by another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert!(v.tape == self.id, "variable belongs to a different tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.id].requires_grad
    }

    /// Appends the result of an operation.
    ///
    /// Non-finite outputs are rejected. When no input requires a gradient
    /// the backward rule is dropped and the node behaves as a constant.
    pub fn record<O: Operation + 'static>(
        &mut self,
        op: O,
        inputs: &[Var],
        output: Tensor,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !output.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        self.nodes.push(Node {
            value: output,
            requires_grad,
            inputs: if requires_grad {
                inputs.iter().map(|v| v.id).collect()
            } else {
                Vec::new()
            },
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Propagates d(loss)/d(node) back to every grad-requiring leaf.
    ///
    /// Leaves that the loss does not depend on receive an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.id).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardContext {
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                needs: node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect(),
                output: &node.value,
            };
            let input_grads = op.backward(&ctx, &grad)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[j].value.len(), "{}", op.name());
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && node.op.is_none() {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(i, g);
            }
        }
        Ok(Gradients {
            grads: out,
            tape: self.id,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    tape: u64,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.id)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.id)
    }
}
