//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every op eagerly computes its output and, when any input requires a
//! gradient, records a backward closure together with its parent handles.
//! [`Tensor::backward`] walks that graph in reverse topological order and
//! accumulates gradients into the leaves.
//!
//! Tensors are reference counted handles; cloning one is cheap and shares the
//! underlying buffer. Parameter buffers are mutated in place by the optimizer.

mod adamw;
mod checkpoint;
mod ops;
mod scalar;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use thiserror::Error;

pub use adamw::{AdamW, AdamWConfig, AdamWState};
pub use checkpoint::{Checkpoint, CheckpointTensor, TensorRole};
pub use ops::cross_entropy_rows;
pub use scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("target id {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording backward graphs on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Inputs handed to a backward closure.
pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub parents: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Scalar = f32>(Arc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.read();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        assert_eq!(numel(&shape), data.len(), "data length does not match shape {shape:?}");
        Tensor(Arc::new(Inner {
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            node,
        }))
    }

    /// A constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "new",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![], vec![v], false, None)
    }

    /// Output of an op. Records the backward closure only when gradients are
    /// enabled and some parent needs one.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let node = track.then(|| Node { op, parents, backward });
        Self::build(shape, data, track, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read()
    }

    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.0.data.write()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.read().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.read();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    /// Accumulated gradient; zeros when none has been written.
    pub fn grad(&self) -> Vec<T> {
        self.0
            .grad
            .lock()
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    pub(crate) fn grad_snapshot(&self) -> Option<Vec<T>> {
        self.0.grad.lock().clone()
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Populates gradients of every reachable leaf that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS gives a topological order (parents first).
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, next)) = stack.pop() {
            let parents = t.0.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.key()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(node) = t.0.node.as_ref() else {
                continue;
            };
            let Some(grad) = pending.remove(&t.key()) else {
                continue;
            };
            let out = t.0.data.read();
            let ctx = BackwardCtx {
                grad: &grad,
                out: &out,
                parents: &node.parents,
            };
            let parent_grads = (node.backward)(&ctx);
            drop(out);
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), p.numel(), "bad gradient length from {}", node.op);
                if p.is_leaf() {
                    let mut slot = p.0.grad.lock();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                } else {
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(p.key(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Same values cast into another element type, as a fresh leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), data, self.requires_grad() && self.is_leaf(), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_gives_ones() {
        let x = Tensor::<f64>::parameter(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad(), vec![1.0; 4]);
    }

    #[test]
    fn square_backward() {
        let x = Tensor::<f64>::parameter(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad(), vec![6.0]);
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let unused = Tensor::<f64>::parameter(&[3], vec![1.0; 3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(unused.grad(), vec![0.0; 3]);
        assert!(!unused.has_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarBackward(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (x + x) . sum, dy/dx = 2
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let y = x.add(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad(), vec![2.0; 3]);
    }

    #[test]
    fn no_grad_skips_graph() {
        let x = Tensor::<f32>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let a = Tensor::<f32>::parameter(&[3, 4], (0..12).map(|i| (i as f32).sin()).collect())
                .unwrap();
            let b = Tensor::<f32>::parameter(&[4, 2], (0..8).map(|i| (i as f32).cos()).collect())
                .unwrap();
            let y = a.matmul(&b).unwrap().gelu().softmax_rows().unwrap();
            y.mul(&y).unwrap().sum().backward().unwrap();
            (a.grad(), b.grad())
        };
        assert_eq!(run(), run());
    }
}
