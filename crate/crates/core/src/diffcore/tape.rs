use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Computes the gradient contribution for every parent of a node.
///
/// Arguments are the upstream gradient, the parent values (in parent order) and
/// the node's own forward value.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

/// Define-by-run record of one forward computation.
///
/// Node ids are assigned in creation order, so every parent precedes its child and the
/// reverse sweep in [`Tape::backward`] is a valid reverse topological order. A tape can
/// be back-propagated once.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that collects a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never collects a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var { tape: self, id }
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced (shape {:?})",
                value.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::State("tape already back-propagated".into()));
        }
        let mut ids = Vec::with_capacity(parents.len());
        for p in parents {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::State("variable belongs to another tape".into()));
            }
            ids.push(p.id);
        }
        let requires_grad = ids.iter().any(|&i| inner.nodes[i].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            parents: ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var { tape: self, id })
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients are accumulated additively across fan-out and stay readable through
    /// [`Var::grad`] afterwards.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::State("root belongs to another tape".into()));
        }
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        if inner.consumed {
            return Err(Error::State("backward already run on this tape".into()));
        }
        let root_value = inner.nodes[root.id].value.clone();
        if root_value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        inner.consumed = true;

        let n = root.id + 1;
        let mut grads: Vec<Option<Tensor>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::filled(root_value.shape(), 1.0));

        for id in (0..n).rev() {
            let node = &inner.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(upstream) = upper[0].as_ref() else {
                continue;
            };
            let parent_values: Vec<Rc<Tensor>> = node
                .parents
                .iter()
                .map(|&p| inner.nodes[p].value.clone())
                .collect();
            let contributions = backward(upstream, &parent_values, &node.value);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(contributions) {
                if !inner.nodes[p].requires_grad {
                    continue;
                }
                match &mut lower[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        inner.grads = grads;
        Ok(())
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient; zeros when the node was not reached or backward has not run.
    pub fn grad(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        match inner.grads.get(self.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(inner.nodes[self.id].value.shape()),
        }
    }

    /// A constant copy of this value; gradients do not flow through it.
    pub fn detach(&self) -> Var<'t> {
        let value = (*self.value()).clone();
        self.tape.constant(value)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}
