use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Vector-Jacobian product of one recorded op: `(grad_out, parent values,
/// output value) -> one gradient per parent`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Append-only record of one forward computation.
///
/// Parents always precede children, so reverse tape order is a valid
/// reverse-topological order. A tape is meant to live for a single training
/// step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, n.op, n.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            op: "leaf",
            value,
            parents: vec![],
            backward: None,
            requires_grad: true,
        })
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            op: "constant",
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
        })
    }

    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    /// Runs `forward` on the parents' values and records the result with a
    /// user-supplied backward. The backward must return one gradient per
    /// parent with the parent's shape; anything else is a shape error when
    /// [`Tape::backward`] runs.
    pub fn custom_node<'t, F, B>(&'t self, op: &'static str, parents: &[Var<'t>], forward: F, backward: B) -> Result<Var<'t>>
    where
        F: FnOnce(&[&Tensor]) -> Result<Tensor>,
        B: Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>> + 'static,
    {
        let value = {
            let nodes = self.nodes.borrow();
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &nodes[p.id].value).collect();
            forward(&inputs)?
        };
        Ok(self.record(op, parents, value, Box::new(backward)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward(&g, &inputs, &node.value)?;
            if parent_grads.len() != node.parents.len() {
                return Err(Error::shape(node.op, &[node.parents.len()], &[parent_grads.len()]));
            }
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let pnode = &nodes[p];
                if pg.shape() != pnode.value.shape() {
                    return Err(Error::shape(node.op, pnode.value.shape(), pg.shape()));
                }
                if !pnode.requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value; `None` unless the value has exactly one element.
    pub fn item(&self) -> Option<f64> {
        self.value().item()
    }
}

/// Gradients from one reverse pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the value is unreachable from the loss or is a constant.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}
