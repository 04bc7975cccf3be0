//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is an append-only tape of nodes. Forward operations push a node
//! holding the computed value plus a backward closure; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every reachable
//! leaf created with [`Graph::param`]. Nodes created with [`Graph::constant`]
//! never receive gradients and backward work feeding only constants is
//! skipped.
//!
//! The tape is generic over the element type so the same network code runs in
//! `f32` for training and `f64` for finite-difference checks.
//!
//! Shape errors inside the tape are programming errors, not recoverable
//! conditions, so ops panic on malformed inputs.

mod conv;
mod ops;

pub use conv::{col2im, conv_out_size, deconv_out_size, im2col};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use std::cell::{Ref, RefCell};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type usable on the tape.
pub trait Scalar:
    LinalgScalar
    + num_traits::Float
    + ScalarOperand
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward closure: receives the gradient w.r.t. this node's output and a
/// mask saying which parents actually need gradients; returns one optional
/// gradient per parent (None where the mask is false).
type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &[bool]) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    needs_grad: bool,
}

/// Append-only autodiff tape.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Leaf that never receives a gradient (data, noise, fixed masks).
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that accumulates a gradient (trainable parameter or any input a
    /// gradient check wants to probe).
    pub fn param(&self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Convenience: 0-dim constant.
    pub fn scalar_constant(&self, v: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn push_leaf(&self, value: ArrayD<F>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &self,
        value: ArrayD<F>,
        parents: Vec<Var>,
        backward: BackwardFn<F>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value,
            parents,
            backward: Some(backward),
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<F>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a 0-dim (or single-element) node.
    pub fn scalar(&self, v: Var) -> F {
        let nodes = self.nodes.borrow();
        let value = &nodes[v.0].value;
        assert_eq!(value.len(), 1, "scalar() called on non-scalar node");
        *value.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Reverse pass from a scalar root. Returns gradients for every leaf
    /// created with [`Graph::param`] that the root depends on.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward() requires a scalar root"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; root.0 + 1];
        if !nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue; // leaf: keep any accumulated gradient
            };
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|p| nodes[p.0].needs_grad)
                .collect();
            let parent_grads = backward(&grad_out, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    nodes[parent.0].value.shape(),
                    "gradient shape mismatch for parent node"
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
