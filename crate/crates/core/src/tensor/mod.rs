//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Graph`] is a tape of operations built by one forward pass. Leaves are
//! either constants, free inputs, or bindings of persistent [`Param`]s;
//! calling [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into the bound parameters. A fresh graph is built per step, so
//! the tape is append-only and node ids are already topologically ordered.

mod conv;
mod init;
mod linalg;
mod ops;

pub use init::Initializer;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackCtx<'a, T: Scalar> {
    pub grad: &'a ArrayD<T>,
    pub parents: Vec<&'a ArrayD<T>>,
    pub value: &'a ArrayD<T>,
}

type GradFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Scalar> {
    value: ArrayD<T>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn<T>>,
    requires_grad: bool,
    param: Option<Param<T>>,
    op: &'static str,
}

/// A persistent, possibly trainable tensor shared by reference.
///
/// Cloning a `Param` aliases the same storage, which is how weight sharing
/// (e.g. one UNet serving two generators) is expressed.
pub struct Param<T: Scalar>(Rc<RefCell<ParamInner<T>>>);

pub struct ParamInner<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: Option<ArrayD<T>>,
    pub trainable: bool,
}

impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> Self {
        Param(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            value,
            grad: None,
            trainable,
        })))
    }

    pub fn frozen(name: impl Into<String>, value: ArrayD<T>) -> Self {
        Self::new(name, value, false)
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn value(&self) -> Ref<'_, ArrayD<T>> {
        Ref::map(self.0.borrow(), |p| &p.value)
    }

    pub fn value_mut(&self) -> RefMut<'_, ArrayD<T>> {
        RefMut::map(self.0.borrow_mut(), |p| &mut p.value)
    }

    pub fn set_value(&self, value: ArrayD<T>) {
        self.0.borrow_mut().value = value;
    }

    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.borrow_mut().trainable = trainable;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().value.len()
    }

    /// Identity of the underlying storage; equal iff two handles alias.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accumulate_grad(&self, g: &ArrayD<T>) {
        let mut inner = self.0.borrow_mut();
        match &mut inner.grad {
            Some(acc) => *acc += g,
            None => inner.grad = Some(g.clone()),
        }
    }
}

/// Deduplicate parameter handles by storage identity, preserving order.
pub fn dedupe_params<T: Scalar>(params: Vec<Param<T>>) -> Vec<Param<T>> {
    let mut seen = std::collections::HashSet::new();
    params
        .into_iter()
        .filter(|p| seen.insert(p.ptr_id()))
        .collect()
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push_leaf(value, false, None, "constant")
    }

    /// Leaf whose gradient is retrievable from [`Gradients`] (used by
    /// gradient checks and by callers that differentiate w.r.t. inputs).
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.push_leaf(value, true, None, "input")
    }

    /// Leaf bound to a parameter; backward accumulates into `param.grad`
    /// when the parameter is trainable.
    pub fn bind(&mut self, param: &Param<T>) -> Var {
        let value = param.value().clone();
        let trainable = param.trainable();
        self.push_leaf(value, trainable, Some(param.clone()), "param")
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> T {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.len(), 1, "scalar() on non-scalar node");
        *value.iter().next().expect("non-empty node value")
    }

    pub fn is_finite(&self, v: Var) -> bool {
        self.nodes[v.0].value.iter().all(|x| x.is_finite())
    }

    /// Error unless every element of `v` is finite.
    pub fn check_finite(&self, v: Var, tensor: &str) -> Result<()> {
        if self.is_finite(v) {
            Ok(())
        } else {
            Err(Error::numeric(
                tensor,
                format!("non-finite values produced by `{}`", self.nodes[v.0].op),
            ))
        }
    }

    fn push_leaf(
        &mut self,
        value: ArrayD<T>,
        requires_grad: bool,
        param: Option<Param<T>>,
        op: &'static str,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad,
            param,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<Var>,
        grad_fn: GradFn<T>,
        op: &'static str,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from `root`, seeded with ones. Gradients accumulate into
    /// every trainable bound parameter and are also returned per node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if let Some(param) = &node.param {
                if param.trainable() {
                    param.accumulate_grad(grads[i].as_ref().unwrap());
                }
            }
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let ctx = BackCtx {
                grad: grads[i].as_ref().unwrap(),
                parents: node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect(),
                value: &node.value,
            };
            let contribs = grad_fn(&ctx);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.clone().into_iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    c.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape mismatch from op `{}`",
                    node.op
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Gradients { grads }
    }
}
