//! A small reverse-mode autodiff engine over `ndarray`.
//!
//! Graphs are built eagerly: each operation allocates a node holding its
//! value, its parent handles, and a closure that maps the output gradient to
//! parent gradients. `Tensor` is a cheap reference-counted handle. Nodes get
//! monotonically increasing ids, so descending-id order is a valid reverse
//! topological order for [`Tensor::backward`].
//!
//! Subgraphs whose inputs do not require gradients are collapsed into
//! constants at construction time, which drops parent references early and
//! keeps memory bounded during inference-style passes.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{ArrayD, IxDyn};

mod batchnorm;
pub mod check;
mod conv;
mod float;
mod ops;
mod resize;

pub use conv::{Conv2dSpec, MaxPool2dSpec};
pub use float::{gemm, Scalar};
pub use ops::stable_sigmoid as sigmoid_scalar;
pub use resize::resize_plane;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Gradient closure: receives the node and the gradient of the loss w.r.t.
/// the node's value, returns one optional gradient per parent (in parent
/// order). `None` for parents that do not require gradients.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Node<F>, &ArrayD<F>) -> Vec<Option<ArrayD<F>>>>;

pub struct Node<F: Scalar> {
    id: usize,
    value: ArrayD<F>,
    requires_grad: bool,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
}

/// Handle to a node in the computation graph.
pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> Tensor<F> {
    /// Leaf node. `requires_grad` marks it as a differentiation target.
    pub fn leaf(value: ArrayD<F>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant node (no gradient).
    pub fn constant(value: ArrayD<F>) -> Self {
        Self::leaf(value, false)
    }

    /// 0-d constant.
    pub fn scalar(v: F) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Internal op constructor. Drops the graph edges when no parent needs a
    /// gradient so dead subgraphs free their activations immediately.
    pub(crate) fn from_op(
        value: ArrayD<F>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Tensor(Rc::new(Node {
            id: fresh_id(),
            value,
            requires_grad,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<F> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.0.value.len(), 1, "item() on non-scalar tensor");
        *self.0.value.iter().next().unwrap()
    }

    /// Cut the graph: same value, no gradient path.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from this (scalar) tensor. Returns gradients for
    /// every reachable node that requires one.
    pub fn backward(&self) -> GradMap<F> {
        assert_eq!(self.0.value.len(), 1, "backward() must start from a scalar loss");
        let mut grads: HashMap<usize, ArrayD<F>> = HashMap::new();
        grads.insert(self.id(), ArrayD::from_elem(self.0.value.raw_dim(), F::one()));

        // Collect reachable grad-requiring nodes.
        let mut stack: Vec<Tensor<F>> = vec![self.clone()];
        let mut seen: HashSet<usize> = HashSet::new();
        let mut nodes: Vec<Tensor<F>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Ids increase in construction order, so descending id is reverse
        // topological order.
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        for node in &nodes {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads.get(&node.id()).cloned() else {
                continue;
            };
            let parent_grads = backward(&node.0, &out_grad);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, grad) in node.0.parents.iter().zip(parent_grads) {
                let Some(grad) = grad else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(
                    grad.shape(),
                    parent.shape(),
                    "gradient shape mismatch for node {}",
                    parent.id()
                );
                grads
                    .entry(parent.id())
                    .and_modify(|g| *g += &grad)
                    .or_insert(grad);
            }
        }
        GradMap { grads }
    }
}

impl<F: Scalar> Node<F> {
    pub fn value(&self) -> &ArrayD<F> {
        &self.value
    }

    pub fn parent_value(&self, i: usize) -> &ArrayD<F> {
        self.parents[i].value()
    }

    pub fn parent_requires_grad(&self, i: usize) -> bool {
        self.parents[i].requires_grad()
    }

    pub fn parents_len(&self) -> usize {
        self.parents.len()
    }
}

/// Gradients produced by one backward sweep, keyed by node id.
pub struct GradMap<F: Scalar> {
    grads: HashMap<usize, ArrayD<F>>,
}

impl<F: Scalar> GradMap<F> {
    pub fn grad(&self, t: &Tensor<F>) -> Option<&ArrayD<F>> {
        self.grads.get(&t.id())
    }

    pub fn grad_or_zeros(&self, t: &Tensor<F>) -> ArrayD<F> {
        self.grads
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(t.value().raw_dim()))
    }
}

/// Shared mutable state for layer buffers (spectral-norm power-iteration
/// vectors, batch-norm running statistics).
pub type SharedArray<F> = Rc<RefCell<ArrayD<F>>>;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // z = x*x + x  => dz/dx = 2x + 1
        let x = Tensor::leaf(arr1(&[3.0f64]).into_dyn(), true);
        let z = x.mul(&x).add(&x).sum_all();
        let grads = z.backward();
        let g = grads.grad(&x).unwrap();
        assert_eq!(g[[0]], 7.0);
    }

    #[test]
    fn constant_folding_drops_graph() {
        let a = Tensor::constant(arr1(&[1.0f64, 2.0]).into_dyn());
        let b = Tensor::constant(arr1(&[3.0f64, 4.0]).into_dyn());
        let c = a.mul(&b);
        assert!(!c.requires_grad());
        assert!(c.0.parents.is_empty());
    }
}
