//! Reverse-mode tape.
//!
//! Every [`Var`] is a node on a [`Tape`]. Forward values are computed eagerly;
//! a node whose inputs participate in differentiation also records a backward
//! closure. [`Tape::backward`] runs those closures once, in reverse creation
//! order, so parents always precede children.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

type BackwardFn = Box<dyn FnOnce(&Tensor, &mut GradSink)>;

struct Node {
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    requires: RefCell<Vec<bool>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
}

impl GradSink {
    /// Whether the node participates in differentiation.
    pub fn wants(&self, id: NodeId) -> bool {
        self.requires[id]
    }

    /// Adds `g` into the node's accumulator. Ignored for detached nodes.
    pub fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.requires[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of a scalar loss with respect to every tape leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            requires: RefCell::new(Vec::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that only evaluates values; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.requires.get_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, backward: Option<BackwardFn>, requires_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { backward });
        self.requires.borrow_mut().push(requires_grad);
        nodes.len() - 1
    }

    /// Differentiable leaf (a trainable parameter or an input under test).
    pub fn leaf(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        let requires_grad = self.grad_enabled;
        let id = self.push(None, requires_grad);
        Var {
            tape: self,
            id,
            value: value.into(),
            requires_grad,
        }
    }

    /// Constant node; never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        let id = self.push(None, false);
        Var {
            tape: self,
            id,
            value: value.into(),
            requires_grad: false,
        }
    }

    /// Records an operation with a hand-written vector-Jacobian product.
    ///
    /// `backward` receives the gradient of the output and pushes parent
    /// gradients into the sink by node id. It runs only if at least one parent
    /// requires a gradient.
    pub fn custom_op<'t, F>(&'t self, value: Tensor, parents: &[&Var<'t>], backward: F) -> Var<'t>
    where
        F: FnOnce(&Tensor, &mut GradSink) + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad);
        let bw: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        let id = self.push(bw, requires_grad);
        Var {
            tape: self,
            id,
            value: Arc::new(value),
            requires_grad,
        }
    }

    /// Reverse sweep from a scalar loss. A tape can be swept only once.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::NotScalar(loss.value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let n = loss.id + 1;
        let mut closures: Vec<Option<BackwardFn>> = {
            let mut nodes = self.nodes.borrow_mut();
            nodes[..n].iter_mut().map(|node| node.backward.take()).collect()
        };
        let requires = self.requires.borrow()[..n].to_vec();
        let mut sink = GradSink {
            grads: vec![None; n],
            requires,
        };
        if sink.requires[loss.id] {
            sink.grads[loss.id] = Some(Tensor::ones(loss.value.shape()));
        }
        for id in (0..n).rev() {
            if let Some(f) = closures[id].take() {
                if let Some(g) = sink.grads[id].take() {
                    f(&g, &mut sink);
                }
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value_arc())
    }
}
