use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use super::{Real, Result, Tensor, TensorError};

/// Backward rule of one recorded op: maps the output gradient to one optional
/// gradient per input. The flags say which inputs need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    leaf: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    grad: Option<Tensor<T>>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation, so the backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Adds an input tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node {
            op: "leaf",
            value: value.into(),
            requires_grad,
            leaf: true,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        })
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation name and value of every node in recording order. Inputs
    /// are named `"leaf"`.
    pub fn values(&self) -> Vec<(&'static str, Arc<Tensor<T>>)> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| (n.op, n.value.clone()))
            .collect()
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op. The backward rule is kept only when some
    /// input requires a gradient.
    pub(crate) fn record<'g>(
        &'g self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'g, T>],
        backward: BackwardFn<T>,
    ) -> Var<'g, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push_node(Node {
            op,
            value: Arc::new(value),
            requires_grad,
            leaf: false,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            grad: None,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every leaf created with `requires_grad` holds `d loss / d leaf`
    /// (zeros for leaves the loss does not depend on). A graph supports one
    /// backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        let (len, seed) = {
            let nodes = self.nodes.borrow();
            let value = &nodes[loss.id].value;
            if value.numel() != 1 {
                return Err(TensorError::NotScalar(value.shape().to_vec()));
            }
            (nodes.len(), Tensor::ones(value.shape().to_vec()))
        };
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = (0..len).map(|_| None).collect();
        grads[loss.id] = Some(seed);
        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let (rule, inputs, needs) = {
                let mut nodes = self.nodes.borrow_mut();
                if nodes[id].leaf {
                    if nodes[id].requires_grad {
                        nodes[id].grad = Some(grad);
                    }
                    continue;
                }
                let Some(rule) = nodes[id].backward.take() else {
                    continue;
                };
                let inputs = nodes[id].inputs.clone();
                let needs: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                (rule, inputs, needs)
            };
            let input_grads = rule(&grad, &needs);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for ((input, need), g) in inputs.into_iter().zip(needs).zip(input_grads) {
                let Some(g) = g.filter(|_| need) else {
                    continue;
                };
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut nodes = self.nodes.borrow_mut();
        for node in nodes.iter_mut() {
            node.backward = None;
            if node.leaf && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient populated by [`Graph::backward`], for leaves that require one.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    pub fn backward(self) -> Result<()> {
        self.graph.backward(self)
    }
}
