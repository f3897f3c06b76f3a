use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Inputs handed to a backward rule.
pub(crate) struct BackCtx<'a, T> {
    /// Upstream gradient, same layout as `output`.
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

/// Vector-Jacobian product: one optional gradient per input, in input order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are only ever pushed after their inputs, so node order is a
/// topological order. A tape may be differentiated once.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    /// Records an operation. `forward` sees the input values in order; the
    /// backward rule is dropped when no input needs a gradient.
    pub(crate) fn record<F, B>(&self, inputs: &[Var<'_, T>], forward: F, backward: B) -> Result<Var<'_, T>>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        B: Fn(&BackCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        for v in inputs {
            assert!(
                std::ptr::eq(v.tape, self),
                "operation mixes variables from different tapes"
            );
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = forward(&values)?;
            let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward) as BackwardFn<T>)
            } else {
                None
            },
            requires_grad,
            leaf: false,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf reachable from `loss` gets its accumulated
    /// gradient; unreachable ones read back as zeros through
    /// [`Gradients::wrt`]. A tape can only be differentiated once.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.leaf {
                if node.requires_grad {
                    leaf_grads[id] = Some(g);
                }
                continue;
            }
            let Some(rule) = &node.backward else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackCtx {
                grad: &g,
                output: &node.value,
                inputs: &inputs,
                needs: &needs,
            };
            let parent_grads = rule(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Ok(Gradients {
            grads: leaf_grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.to_tensor();
        self.tape.constant(value)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on a tensor of shape {:?}", v.shape());
        v.data()[0]
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; zeros when `var` is not a trainable leaf reachable
    /// from the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient flowed into `var`.
    pub fn reached(&self, var: Var<'_, T>) -> bool {
        self.grads[var.id].is_some()
    }
}
