//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to shared storage. Differentiable
//! ops (see [`ops`]) record a [`Node`] on their output holding the input
//! handles and a backward function; [`Tensor::backward`] builds the [`Tape`]
//! (a topological ordering of the recorded ops) and replays it in reverse,
//! accumulating gradients into every reachable tensor.
//!
//! Gradients accumulate across backward passes until cleared with
//! [`Tensor::zero_grad`]. Tensors and the graphs they form are confined to a
//! single thread; extract plain data (e.g. via [`crate::checkpoint`]) to move
//! values across threads.

mod ops;

pub use ops::*;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

type BackwardFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

/// How a non-leaf tensor was produced: parent handles plus the backward
/// function mapping the output gradient to per-input gradients.
pub(crate) struct Node<S: Scalar> {
    inputs: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct TensorData<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    node: Option<Node<S>>,
}

/// Dense N-dimensional tensor handle with optional gradient tracking.
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<TensorData<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("has_grad", &d.grad.is_some())
            .field("is_leaf", &d.node.is_none())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    // ── Construction ─────────────────────────────────────────────────

    /// Leaf tensor from row-major data. Zero extents are allowed (empty data).
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Data(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![S::zero(); numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel])
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: S) -> Self {
        Self::leaf(vec![], vec![value])
    }

    /// Identity matrix of extent `d`.
    pub fn eye(d: usize) -> Self {
        let mut data = vec![S::zero(); d * d];
        for i in 0..d {
            data[i * d + i] = S::one();
        }
        Self::leaf(vec![d, d], data)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<S>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad: false,
                node: None,
            })),
        }
    }

    pub(crate) fn from_node(shape: Vec<usize>, data: Vec<S>, node: Node<S>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad: false,
                node: Some(node),
            })),
        }
    }

    /// Mark as a trainable leaf (builder form).
    pub fn tracked(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the row-major data.
    pub fn data(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Run `f` over the data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on tensor of shape {:?}", d.shape);
        d.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    /// Participates in gradient flow: a trainable leaf or an op output.
    pub fn is_tracked(&self) -> bool {
        let d = self.inner.borrow();
        d.requires_grad || d.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().node.is_none()
    }

    /// Copy of the accumulated gradient, if any pass has populated it.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    /// Accumulated gradient, zeros when no gradient has flowed here.
    pub fn grad_or_zeros(&self) -> Vec<S> {
        let d = self.inner.borrow();
        match &d.grad {
            Some(g) => g.clone(),
            None => vec![S::zero(); d.data.len()],
        }
    }

    /// Clear the gradient accumulator.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the stored data. Shape must match; the graph linkage is
    /// untouched, so this is intended for optimizer updates on leaves.
    pub fn set_data(&self, data: Vec<S>) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(
            d.data.len(),
            data.len(),
            "set_data length mismatch for shape {:?}",
            d.shape
        );
        d.data = data;
    }

    /// In-place update of the data through a closure (optimizer steps).
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.borrow_mut().data)
    }

    /// New untracked leaf with copied data.
    pub fn detach(&self) -> Self {
        let d = self.inner.borrow();
        Self::leaf(d.shape.clone(), d.data.clone())
    }

    /// Fresh leaf with copied data, preserving `requires_grad`. The copy has
    /// independent storage and an empty gradient.
    pub fn deep_clone(&self) -> Self {
        let d = self.inner.borrow();
        let t = Self::leaf(d.shape.clone(), d.data.clone());
        t.set_requires_grad(d.requires_grad);
        t
    }

    /// Pointer identity of the shared storage.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const () as usize
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), d.data.len());
        match &mut d.grad {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            None => d.grad = Some(g.to_vec()),
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar. Gradients of every tracked tensor
    /// reachable through the graph are accumulated into their `grad` fields;
    /// repeated calls keep accumulating until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(),
            });
        }
        let tape = Tape::trace(self);

        // Per-pass gradients live in a side table so that re-running backward
        // on the same graph accumulates instead of compounding.
        let mut local: HashMap<usize, Vec<S>> = HashMap::new();
        local.insert(self.ptr_id(), vec![S::one()]);

        for t in tape.entries().iter().rev() {
            let Some(g_out) = local.get(&t.ptr_id()).cloned() else {
                continue;
            };
            let d = t.inner.borrow();
            if let Some(node) = &d.node {
                let grads = (node.backward)(&g_out);
                debug_assert_eq!(grads.len(), node.inputs.len());
                for (inp, g) in node.inputs.iter().zip(grads) {
                    let Some(g) = g else { continue };
                    if !inp.is_tracked() {
                        continue;
                    }
                    debug_assert_eq!(g.len(), inp.numel());
                    let entry = local
                        .entry(inp.ptr_id())
                        .or_insert_with(|| vec![S::zero(); g.len()]);
                    for (a, x) in entry.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
        }

        for t in tape.entries() {
            if let Some(g) = local.get(&t.ptr_id()) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the recorded ops reachable from one root:
/// every entry appears after all entries producing its inputs, and backward
/// traverses it exactly once in reverse.
pub struct Tape<S: Scalar> {
    order: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Depth-first postorder over the graph below `root`.
    pub fn trace(root: &Tensor<S>) -> Self {
        enum Frame<S: Scalar> {
            Enter(Tensor<S>),
            Exit(Tensor<S>),
        }
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack = vec![Frame::Enter(root.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.ptr_id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    let d = t.inner.borrow();
                    if let Some(node) = &d.node {
                        for inp in &node.inputs {
                            if !visited.contains(&inp.ptr_id()) {
                                stack.push(Frame::Enter(inp.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        Tape { order }
    }

    /// Entries in topological order (inputs before outputs).
    pub fn entries(&self) -> &[Tensor<S>] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Position of a tensor on the tape, if recorded.
    pub fn position_of(&self, t: &Tensor<S>) -> Option<usize> {
        self.order.iter().position(|e| e.ptr_id() == t.ptr_id())
    }

    /// Check the topological invariant: every op's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        let pos: HashMap<usize, usize> = self
            .order
            .iter()
            .enumerate()
            .map(|(i, t)| (t.ptr_id(), i))
            .collect();
        for (i, t) in self.order.iter().enumerate() {
            let d = t.inner.borrow();
            if let Some(node) = &d.node {
                for inp in &node.inputs {
                    if let Some(&j) = pos.get(&inp.ptr_id()) {
                        if j >= i {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_extent_tensor_is_valid() {
        let t = Tensor::<f64>::from_vec(vec![0, 4], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
        assert_eq!(t.shape(), vec![0, 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::ones(&[2]).tracked();
        let s = ops::scale(&t, 2.0);
        match s.backward() {
            Err(Error::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn disconnected_leaf_keeps_zero_grad() {
        let w = Tensor::<f64>::ones(&[3]).tracked();
        let lonely = Tensor::<f64>::ones(&[3]).tracked();
        let loss = ops::sum(&w);
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(lonely.grad().is_none());
        assert_eq!(lonely.grad_or_zeros(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let w = Tensor::<f64>::from_vec(vec![2], vec![3.0, -1.0])
            .unwrap()
            .tracked();
        let loss = ops::sum(&ops::mul(&w, &w).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, -2.0]);
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![12.0, -4.0]);
        w.zero_grad();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn tape_is_topological_and_visits_once() {
        let a = Tensor::<f64>::ones(&[2]).tracked();
        let b = ops::scale(&a, 2.0);
        let c = ops::add(&a, &b).unwrap();
        let d = ops::mul(&b, &c).unwrap();
        let loss = ops::sum(&d);
        let tape = Tape::trace(&loss);
        assert!(tape.is_topologically_ordered());
        // every tensor appears exactly once
        let mut ids: Vec<usize> = tape.entries().iter().map(|t| t.ptr_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), tape.len());
        assert!(tape.position_of(&a).unwrap() < tape.position_of(&b).unwrap());
        assert!(tape.position_of(&c).unwrap() < tape.position_of(&d).unwrap());
    }

    #[test]
    fn untracked_graph_records_nothing() {
        let a = Tensor::<f64>::ones(&[2, 2]);
        let b = Tensor::<f64>::ones(&[2, 2]);
        let c = ops::add(&a, &b).unwrap();
        assert!(!c.is_tracked());
        assert!(c.is_leaf());
    }

    #[test]
    fn deep_clone_is_independent() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0])
            .unwrap()
            .tracked();
        let b = a.deep_clone();
        assert!(b.requires_grad());
        b.update_data(|d| d[0] = 99.0);
        assert_eq!(a.data(), vec![1.0, 2.0]);
        assert_eq!(b.data(), vec![99.0, 2.0]);
    }
}
