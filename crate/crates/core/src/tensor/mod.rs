//! Dense n-dimensional `f32` arrays with reverse-mode automatic
//! differentiation over the operation set needed by the models in this
//! crate.
//!
//! A [`Tensor`] is a plain value: cloning is cheap (the payload is shared),
//! and a tensor without gradient tracking is `Send + Sync`. Gradient
//! tracking starts at *parameters* (leaves created with
//! [`Tensor::param`]); any operation consuming a tracked tensor records a
//! node on the implicit tape, and [`Tensor::backward`] replays the recorded
//! operations once, in reverse order, accumulating gradients into the leaf
//! slots.
//!
//! Storage is `f32` throughout the model path. The same operations are
//! also instantiated at `f64` for gradient verification, which needs a
//! higher-precision shadow evaluation than `f32` can provide.

mod graph;
mod kernels;
mod ops;

pub mod gradcheck;

pub use graph::backward;
pub use kernels::{BatchNormState, BnMode, BN_EPS, BN_MOMENTUM};
pub use ops::{conv2d_output_dim, conv_transpose2d_output_dim};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use graph::{GradSlot, Node, Rule};

/// Scalar element type the tensor machinery is generic over.
///
/// `f32` is the storage type for all model data; `f64` exists for the
/// shadow evaluation used by gradient checks.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_SEQ: AtomicU64 = AtomicU64::new(0);

fn next_seq() -> u64 {
    NEXT_SEQ.fetch_add(1, Ordering::Relaxed)
}

/// Dense n-dimensional array in row-major order.
///
/// Invariants: `shape.iter().product() == data.len()`; a gradient, when
/// present, has the same element count as the data.
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<Arc<Node<E>>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, tracked={}, requires_grad={})",
            self.shape,
            self.node.is_some(),
            self.requires_grad()
        )
    }
}

impl<E: Element> Tensor<E> {
    /// Untracked tensor from a flat row-major buffer.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![E::zero(); numel]), node: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]), node: None }
    }

    /// Trainable leaf. Gradients accumulate into its slot during
    /// [`backward`]; all clones share the slot.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        let slot: Arc<GradSlot<E>> = Arc::new(Mutex::new(None));
        t.node = Some(Arc::new(Node {
            seq: next_seq(),
            parents: vec![],
            rule: Rule::Leaf { slot, numel: t.numel() },
        }));
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access to the payload. Copies on write if the buffer is
    /// shared (e.g. still referenced by a recorded graph).
    pub fn data_mut(&mut self) -> &mut [E] {
        let owned: &mut Vec<E> = Arc::make_mut(&mut self.data);
        owned
    }

    /// Scalar value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    /// True for leaves created with [`Tensor::param`].
    pub fn requires_grad(&self) -> bool {
        matches!(self.node.as_deref(), Some(Node { rule: Rule::Leaf { .. }, .. }))
    }

    /// Whether this tensor participates in a recorded graph (leaf or
    /// intermediate of a tracked computation).
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Accumulated gradient of a parameter leaf. `None` until a backward
    /// pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<E>> {
        match self.node.as_deref() {
            Some(Node { rule: Rule::Leaf { slot, .. }, .. }) => {
                slot.lock().expect("grad slot poisoned").clone()
            }
            _ => None,
        }
    }

    /// Gradient of a parameter leaf, zeros if no backward pass reached it.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.grad().unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    /// Clears the accumulated gradient (next backward starts from zero).
    pub fn zero_grad(&self) {
        if let Some(Node { rule: Rule::Leaf { slot, .. }, .. }) = self.node.as_deref() {
            *slot.lock().expect("grad slot poisoned") = None;
        }
    }

    /// Removes and returns the accumulated gradient of a parameter leaf.
    pub fn take_grad(&self) -> Option<Vec<E>> {
        match self.node.as_deref() {
            Some(Node { rule: Rule::Leaf { slot, .. }, .. }) => {
                slot.lock().expect("grad slot poisoned").take()
            }
            _ => None,
        }
    }

    /// Same payload, no graph membership. Ops on the result record nothing.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Reshape without copying. Element count must be unchanged.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        let mut out = self.clone();
        out.shape = shape;
        // Reshape is layout-preserving, so the recorded node (if any)
        // stays valid: gradients are flat buffers.
        Ok(out)
    }

    /// Runs the reverse pass from a scalar loss. See [`backward`].
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node<E>>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Option<Arc<Node<E>>>>,
        rule: Rule<E>,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.is_some());
        let node = tracked.then(|| Arc::new(Node { seq: next_seq(), parents, rule }));
        Tensor { shape, data: Arc::new(data), node }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }
}

impl Tensor<f32> {
    /// Lossless copy into the `f64` shadow domain (drops graph membership).
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| v as f64).collect()),
            node: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn param_leaf_has_grad_semantics() {
        let p = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(p.requires_grad());
        assert!(p.grad().is_none());
        assert_eq!(p.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn detach_drops_tracking() {
        let p = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let d = p.detach();
        assert!(!d.is_tracked());
        assert_eq!(d.data(), p.data());
    }

    #[test]
    fn clone_shares_grad_slot() {
        let p = Tensor::<f32>::param(vec![1], vec![3.0]).unwrap();
        let q = p.clone();
        let r = q.relu().unwrap();
        r.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0]);
    }
}
