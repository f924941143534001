//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and a closure that maps
//! the output gradient to gradients of its inputs. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological
//! order for the pullback.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

pub(crate) type Pullback<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    pullback: Option<Pullback<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only. Nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            pullback: None,
            requires_grad: false,
        })
    }

    /// Differentiable input not owned by a parameter store.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            pullback: None,
            requires_grad: self.grad_enabled,
        })
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id on one
    /// tape return the same node so gradients from every use accumulate there.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let var = self.push_node(Node {
            value: p.value_arc(),
            parents: Vec::new(),
            pullback: None,
            requires_grad: self.grad_enabled && p.trainable(),
        });
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    /// Record the result of an op. `pullback` receives the output gradient and
    /// returns one optional gradient per parent, in order.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        pullback: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            pullback: if requires_grad {
                Some(Box::new(pullback))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(pullback) = node.pullback.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = pullback(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{})", self.id)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub(crate) fn take_param(&mut self, id: ParamId) -> Option<Tensor<T>> {
        let node = *self.params.get(&id)?;
        self.grads[node].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn linear_form_gradient_is_the_other_factor() {
        let tape = Tape::<f64>::new();
        let x = Tensor::new([3], vec![1.5, -2.0, 4.0]).unwrap();
        let w = tape.leaf(Tensor::new([3], vec![0.3, 0.1, -0.7]).unwrap());
        let xv = tape.constant(x.clone());
        let loss = ops::sum(ops::mul(w, xv).unwrap());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &x);
        assert!(grads.get(xv).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new([2], vec![2.0, 3.0]).unwrap());
        // sum(w * w) -> 2w
        let loss = ops::sum(ops::mul(w, w).unwrap());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn no_grad_tape_records_no_pullbacks() {
        let tape = Tape::<f32>::no_grad();
        let w = tape.leaf(Tensor::ones([2]));
        let s = ops::sum(w);
        assert!(!s.requires_grad());
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
    }
}
