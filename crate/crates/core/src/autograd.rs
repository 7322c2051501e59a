//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted node holding its forward value. Nodes
//! that require a gradient keep their parents and a backward closure alive;
//! nodes that do not are plain values, so inference releases intermediates
//! as soon as they go out of scope.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::params::ParamId;
use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a, T: Scalar> {
    /// Gradient of the objective with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Forward values of the parents, in the order they were registered.
    pub inputs: Vec<&'a Tensor<T>>,
    /// This node's forward value.
    pub output: &'a Tensor<T>,
    /// Which parents need a gradient; closures may return `None` for the rest.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

impl<T: Scalar> Drop for Node<T> {
    // Iterative teardown so long chains do not exhaust the stack.
    fn drop(&mut self) {
        let mut stack: Vec<Var<T>> = std::mem::take(&mut self.parents);
        while let Some(var) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(var.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn new(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
        param: Option<ParamId>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
            param,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new(value, false, Vec::new(), None, None)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::new(value, true, Vec::new(), None, None)
    }

    pub(crate) fn param(value: Tensor<T>, id: ParamId, requires_grad: bool) -> Self {
        Self::new(value, requires_grad, Vec::new(), None, Some(id))
    }

    /// Registers the result of an operation. The backward closure and the
    /// parents are retained only when some parent requires a gradient.
    pub fn from_op(value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Self::new(value, true, parents, Some(backward), None)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Detached copy of the value.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Back-propagates from a single-element output with seed gradient 1.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.value().len(),
            1,
            "backward() needs a scalar output; use backward_with"
        );
        self.backward_with(Tensor::full(self.shape(), T::one()))
    }

    /// Back-propagates an arbitrary seed gradient of the output's shape.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        if !self.requires_grad() {
            return out;
        }

        // Collect the reachable grad-requiring subgraph. Ids grow with
        // creation time, so descending id order is a topological order.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if seen.insert(v.id(), ()).is_some() {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), seed);
        for node in &order {
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                Some(backward) => {
                    let parents = &node.0.parents;
                    let args = BackwardArgs {
                        grad: &grad,
                        inputs: parents.iter().map(|p| p.value()).collect(),
                        output: node.value(),
                        needs: parents.iter().map(|p| p.requires_grad()).collect(),
                    };
                    let parent_grads = backward(&args);
                    debug_assert_eq!(parent_grads.len(), parents.len());
                    for (p, g) in parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), p.shape(), "gradient shape");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                grads.insert(p.id(), g);
                            }
                        }
                    }
                }
                None => match node.0.param {
                    Some(pid) => match out.params.get_mut(&pid) {
                        Some(acc) => acc.add_assign(&grad),
                        None => {
                            out.params.insert(pid, grad);
                        }
                    },
                    None => {
                        out.leaves.insert(node.id(), grad);
                    }
                },
            }
        }
        out
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.params.remove(&id)
    }

    /// Gradient with respect to a leaf created by [`Var::leaf`].
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}
