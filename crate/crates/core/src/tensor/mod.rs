//! Reverse-mode automatic differentiation over dynamically shaped `f64` arrays.
//!
//! A [`Tape`] records every operation as it happens; [`backward`] replays the
//! tape in reverse and accumulates gradients for leaf variables. The op set is
//! deliberately small: elementwise arithmetic with numpy-style broadcasting,
//! dense matmul, 3x3-style convolutions, nearest-neighbour upsampling, softmax,
//! reductions and embedding lookups — enough to express the encoder, decoder,
//! denoiser and every attack loss in the crate.
//!
//! All arithmetic is `f64` so the same code path serves both training and the
//! finite-difference gradient checks.

mod conv;
mod ops;

pub use conv::{conv2d_forward, conv_out_hw};

use ndarray::{ArrayD, Axis, IxDyn};
use ops::Op;
use std::cell::{Ref, RefCell};

pub type Real = f64;

pub(crate) struct Node {
    pub value: ArrayD<Real>,
    pub op: Op,
    /// True when this node or any ancestor is a gradient leaf.
    pub requires: bool,
}

/// Append-only record of a computation. Nodes are referenced by index, so
/// construction order is a valid topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (gradients are accumulated for it).
    pub fn leaf(&self, value: ArrayD<Real>) -> Var<'_> {
        let id = self.push(value, Op::Leaf, true);
        Var { tape: self, id }
    }

    /// A constant input; backward never propagates into it.
    pub fn constant(&self, value: ArrayD<Real>) -> Var<'_> {
        let id = self.push(value, Op::Leaf, false);
        Var { tape: self, id }
    }

    /// Scalar constant as a 0-d array.
    pub fn scalar(&self, v: Real) -> Var<'_> {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    pub(crate) fn push(&self, value: ArrayD<Real>, op: Op, requires: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires,
        });
        nodes.len() - 1
    }

    pub(crate) fn value_ref(&self, id: usize) -> Ref<'_, ArrayD<Real>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub(crate) fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Clone of the node's value.
    pub fn value(&self) -> ArrayD<Real> {
        self.tape.value_ref(self.id).clone()
    }

    /// Run `f` against the node's value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<Real>) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    /// Value of a 0-d (or single-element) node.
    pub fn scalar_value(&self) -> Real {
        let v = self.tape.value_ref(self.id);
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }
}

/// Gradients produced by [`backward`], indexed by node id. Only leaf nodes
/// retain their gradient; intermediate gradients are dropped as soon as they
/// have been consumed.
pub struct Grads {
    slots: Vec<Option<ArrayD<Real>>>,
}

impl Grads {
    /// Gradient w.r.t. `v`, if `v` is a leaf that the loss depends on.
    pub fn wrt(&self, v: Var<'_>) -> Option<&ArrayD<Real>> {
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }

    /// Gradient w.r.t. `v`, zeros when the loss does not depend on it.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> ArrayD<Real> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(&v.shape())),
        }
    }
}

pub(crate) fn accumulate(slot: &mut Option<ArrayD<Real>>, g: ArrayD<Real>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Sum `g` down to `target` shape, undoing numpy-style broadcasting.
pub(crate) fn reduce_to_shape(mut g: ArrayD<Real>, target: &[usize]) -> ArrayD<Real> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] > 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Common broadcast shape of two operand shapes (numpy rules).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Reverse sweep from a scalar loss node. Returns gradients for every leaf
/// the loss depends on.
pub fn backward(loss: Var<'_>) -> Grads {
    let tape = loss.tape;
    let n = tape.nodes.borrow().len();
    let mut slots: Vec<Option<ArrayD<Real>>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    {
        let nodes = tape.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward expects a scalar loss"
        );
        slots[loss.id] = Some(ArrayD::ones(nodes[loss.id].value.raw_dim()));
    }
    for id in (0..=loss.id).rev() {
        let nodes = tape.nodes.borrow();
        if !nodes[id].requires {
            slots[id] = None;
            continue;
        }
        if matches!(nodes[id].op, Op::Leaf) {
            continue;
        }
        let Some(g) = slots[id].take() else { continue };
        ops::backward_step(&nodes, id, &g, &mut slots);
    }
    Grads { slots }
}

#[cfg(test)]
mod tests;
