//! Gradient tape: records each differentiable operation together with a
//! backward closure, then replays the record in strict reverse execution
//! order exactly once to accumulate gradients.

use std::cell::RefCell;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
    pub requires_grad: bool,
    pub back: Option<BackOp>,
}

/// Backward rule of one recorded operation. The closure receives the
/// upstream gradient of the node and one zeroed buffer per parent (in
/// `parents` order) into which it adds each parent's contribution. All
/// values the rule needs were captured by clone at record time, so the
/// replay never re-reads tape state.
pub(crate) struct BackOp {
    pub parents: Vec<usize>,
    pub run: Box<dyn Fn(&[Real], &mut [Vec<Real>])>,
}

/// Ordered record of executed differentiable operations.
///
/// Tapes use interior mutability so operations can be recorded through
/// shared references; they are deliberately single-threaded (`!Sync`).
/// One training step builds one tape, runs [`Tape::backward`], reads
/// gradients, and drops it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<Real>>>>,
}

/// Handle to a value recorded on a tape. Cheap to copy; all arithmetic on
/// `Var` records onto the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<Real>,
        requires_grad: bool,
        back: Option<BackOp>,
    ) -> usize {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            back,
        });
        nodes.len() - 1
    }

    /// Record a leaf holding a copy of `t`.
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, None);
        Var { tape: self, id }
    }

    /// Record a leaf taking ownership of `t`.
    pub fn leaf_owned(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, None);
        Var { tape: self, id }
    }

    pub(crate) fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    /// Run the backward pass from a scalar loss. Every `requires_grad` leaf
    /// reachable from `loss` ends up holding dloss/dleaf; unreachable
    /// variables hold no gradient. Reverse order over the tape guarantees a
    /// node's gradient is complete before its own rule fires.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("backward: variable from a different tape"));
        }
        let n = self.len();
        {
            let nodes = self.nodes.borrow();
            if numel(&nodes[loss.id].shape) != 1 {
                return Err(Error::contract(format!(
                    "backward: loss must be scalar, got shape {:?}",
                    nodes[loss.id].shape
                )));
            }
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        let nodes = self.nodes.borrow();
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let keep = node.requires_grad && node.back.is_none();
            if let Some(back) = &node.back {
                let mut bufs: Vec<Vec<Real>> = back
                    .parents
                    .iter()
                    .map(|&p| vec![0.0; numel(&nodes[p].shape)])
                    .collect();
                (back.run)(&g, &mut bufs);
                for (&p, buf) in back.parents.iter().zip(bufs) {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&buf) {
                                *a += b;
                            }
                        }
                        None => grads[p] = Some(buf),
                    }
                }
            }
            // Leaves keep their gradient for retrieval; interior nodes are
            // dropped once consumed.
            if keep {
                grads[id] = Some(g);
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` when no gradient
    /// reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.with_node(v.id, |n| n.shape.clone());
        Some(Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(&self.with_node(v.id, |n| n.shape.clone())))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn len(&self) -> usize {
        self.tape.with_node(self.id, |n| n.data.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    /// Copy the current value out of the tape (a detach).
    pub fn value(&self) -> Tensor {
        self.tape.with_node(self.id, |n| {
            Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape")
        })
    }

    pub fn item(&self) -> Result<Real> {
        self.tape.with_node(self.id, |n| {
            if n.data.len() == 1 {
                Ok(n.data[0])
            } else {
                Err(Error::contract(format!(
                    "item() on non-scalar var of shape {:?}",
                    n.shape
                )))
            }
        })
    }

    pub(crate) fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operation on vars from different tapes"))
        }
    }
}
