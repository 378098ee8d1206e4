//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation returns a new [`Tensor`]; when any input requires a
//! gradient, the result records its parents and a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order and accumulates gradients into the leaves that require them.
//!
//! Values are immutable once built. The only mutable state is the gradient
//! buffer of leaf tensors, so a graph can be shared read-only across threads
//! while a single thread runs its backward pass.

mod ops;
pub(crate) use ops::sigmoid;
pub mod optim;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Scalar> {
    parents: Vec<Tensor<T>>,
    /// `(grad_out, out_values, parents) -> per-parent gradient`
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
    op: &'static str,
}

/// N-dimensional array of `T` with an optional gradient.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("op", &self.node.op)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &self.node.data)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: None,
                op: "leaf",
            }),
        }
    }

    /// Result of an operation. The graph edge is only kept when some parent
    /// participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Self {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
                op,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.into_param())
    }

    /// Same values as a fresh leaf that requires a gradient.
    pub fn into_param(self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), true)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(Vec::new(), vec![v], false)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::leaf(shape.to_vec(), vec![v; numel_of(shape)], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Constant with i.i.d. `N(0, std²)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| T::lit(rng.normal() * std))
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Name of the operation that produced this tensor.
    pub fn op_name(&self) -> &'static str {
        self.node.op
    }

    /// Accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    /// True when both handles point at the same node.
    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> *const Node<T> {
        Arc::as_ptr(&self.node)
    }

    /// Reverse-mode pass from a single-element loss.
    ///
    /// Gradients are accumulated (not overwritten) into every leaf ancestor
    /// that requires a gradient; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(), &[]));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let grads = (f.backward)(&g, &t.node.data, &f.parents);
                    debug_assert_eq!(grads.len(), f.parents.len());
                    for (p, pg) in f.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size for {}", t.node.op);
                        match pending.get_mut(&p.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the differentiable ancestors of `self`.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.node.grad_fn {
                for p in f.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl<T: Scalar> Drop for Node<T> {
    // Long chains of single-parent nodes would otherwise recurse once per
    // node when the last handle goes away.
    fn drop(&mut self) {
        let Some(f) = self.grad_fn.take() else { return };
        let mut stack = f.parents;
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                if let Some(f) = node.grad_fn.take() {
                    stack.extend(f.parents);
                }
            }
        }
    }
}
