use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use super::{Real, Tensor};
use crate::error::{arg_err, Result};

/// Gradient of the loss with respect to each parent, or `None` when that
/// parent does not need one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Edge<T: Real> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Mutex<Option<Vec<T>>>,
    edge: Mutex<Option<Edge<T>>>,
}

/// A tensor participating in the compute graph.
///
/// Leaves created with [`Var::param`] own persistent gradient buffers that
/// accumulate across backward passes until [`Var::zero_grad`] is called.
/// Interior nodes keep references to their inputs only while some input
/// requires a gradient, so inference builds no graph at all.
#[derive(Clone)]
pub struct Var<T: Real>(Arc<Node<T>>);

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn lock<U>(m: &Mutex<U>) -> MutexGuard<'_, U> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl<T: Real> Var<T> {
    /// A constant input (no gradient).
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A trainable leaf whose gradient is accumulated by [`Var::backward`].
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Self(Arc::new(Node {
            value,
            requires_grad,
            is_leaf: true,
            grad: Mutex::new(None),
            edge: Mutex::new(None),
        }))
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        let edge = requires_grad.then(|| Edge { parents, backward });
        Self(Arc::new(Node {
            value,
            requires_grad,
            is_leaf: false,
            grad: Mutex::new(None),
            edge: Mutex::new(edge),
        }))
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor<T>> {
        lock(&self.0.grad)
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        *lock(&self.0.grad) = None;
    }

    /// Adds `delta` into the persistent gradient buffer.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut g = lock(&self.0.grad);
        match g.as_mut() {
            Some(buf) => buf.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Same data, detached from any graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Backpropagates from a scalar loss and releases the graph.
    pub fn backward(&self) -> Result<()> {
        self.run_backward(false)
    }

    /// Backpropagates from a scalar loss and keeps the graph for another pass.
    pub fn backward_retain(&self) -> Result<()> {
        self.run_backward(true)
    }

    fn run_backward(&self, retain: bool) -> Result<()> {
        if self.0.value.len() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if node.0.is_leaf {
                node.accumulate_grad(&grad);
                continue;
            }
            let mut edge_slot = lock(&node.0.edge);
            let Some(edge) = edge_slot.as_ref() else {
                return Err(arg_err!(
                    "graph was released by an earlier backward; use backward_retain"
                ));
            };
            let parent_grads = (edge.backward)(&grad);
            debug_assert_eq!(parent_grads.len(), edge.parents.len());
            for (parent, pg) in edge.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.value().len());
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    None => {
                        pending.insert(parent.id(), pg);
                    }
                }
            }
            if !retain {
                *edge_slot = None;
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(edge) = lock(&node.0.edge).as_ref() {
                for p in edge.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
