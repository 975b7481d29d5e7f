//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! a [`Function`] that maps the output gradient to input gradients. Backward
//! walks the nodes in exact reverse order of execution. Leaf gradients
//! accumulate across backward calls until [`Tape::zero_grad`]; intermediate
//! gradients are rebuilt from scratch on every call.

mod conv;
pub(crate) mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::Padding;

/// Backward rule for one recorded operation.
pub trait Function<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` means "no gradient" (treated as
    /// zero). Entries for inputs with `ctx.needs_grad(i) == false` are ignored.
    fn backward(&self, ctx: &BackwardContext<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>>;

    /// `Some(offset)` when the output is a contiguous copy of input 0
    /// starting at `offset`; backward then adds the gradient into that window
    /// without materializing a dense input gradient.
    fn window(&self, _ctx: &BackwardContext<'_, T>) -> Option<usize> {
        None
    }
}

/// Read access to the values an op saw during forward.
pub struct BackwardContext<'a, T> {
    inputs: Vec<&'a Tensor<T>>,
    output: &'a Tensor<T>,
    needs: Vec<bool>,
}

impl<'a, T> BackwardContext<'a, T> {
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        self.inputs[i]
    }

    pub fn output(&self) -> &'a Tensor<T> {
        self.output
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
}

/// Which nodes a backward pass visited, in visiting order.
#[derive(Debug, Clone, Default)]
pub struct BackwardReport {
    pub visited: Vec<usize>,
}

/// An ordered record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Vec<T>>>>,
    grad_enabled: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that records values only; no node ever requires grad.
    pub fn no_grad() -> Self {
        let tape = Self::new();
        tape.grad_enabled.set(false);
        tape
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A trainable leaf. The value is copied onto the tape.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        let mut v = value.clone();
        v.set_requires_grad(false);
        let id = self.push(Node {
            value: v,
            inputs: Vec::new(),
            func: None,
            requires_grad: self.grad_enabled(),
        });
        Var { tape: self, id }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, mut value: Tensor<T>) -> Var<'_, T> {
        value.set_requires_grad(false);
        let id = self.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            requires_grad: false,
        });
        Var { tape: self, id }
    }

    /// Appends an operation's output. Rejects non-finite outputs.
    pub fn record<F: Function<T> + 'static>(
        &self,
        inputs: &[Var<'_, T>],
        output: Tensor<T>,
        func: F,
    ) -> Result<Var<'_, T>> {
        if !output.is_finite() {
            return Err(Error::NonFinite(func.name().to_string()));
        }
        let ids: Vec<usize> = inputs
            .iter()
            .map(|v| {
                assert!(std::ptr::eq(v.tape, self), "var from another tape");
                v.id
            })
            .collect();
        let requires_grad = self.grad_enabled() && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let func: Option<Box<dyn Function<T>>> = if requires_grad {
            Some(Box::new(func))
        } else {
            None
        };
        let id = self.push(Node {
            value: output,
            inputs: ids,
            func,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    pub fn value(&self, var: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    /// Accumulated gradient of a leaf created with [`Tape::param`].
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagates d`loss`/d(leaf) into every trainable leaf that `loss`
    /// depends on. Repeated calls add to the leaf gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<BackwardReport> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.id)
            .ok_or_else(|| Error::Backward("loss is not on this tape".into()))?;
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut report = BackwardReport::default();
        if !root.requires_grad {
            return Ok(report);
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            report.visited.push(id);
            match &node.func {
                None => match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                Some(func) => {
                    let ctx = BackwardContext {
                        inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                        output: &node.value,
                        needs: node
                            .inputs
                            .iter()
                            .map(|&i| nodes[i].requires_grad)
                            .collect(),
                    };
                    if let (Some(off), true) = (func.window(&ctx), ctx.needs[0]) {
                        let target = node.inputs[0];
                        let acc = grads[target]
                            .get_or_insert_with(|| vec![T::zero(); nodes[target].value.numel()]);
                        acc[off..off + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, &b)| *a += b);
                        continue;
                    }
                    let input_grads = func.backward(&ctx, &g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
                    for (k, ig) in input_grads.into_iter().enumerate() {
                        let (Some(ig), true) = (ig, ctx.needs[k]) else {
                            continue;
                        };
                        let target = node.inputs[k];
                        debug_assert_eq!(ig.len(), nodes[target].value.numel(), "{}", func.name());
                        match &mut grads[target] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(report)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}
