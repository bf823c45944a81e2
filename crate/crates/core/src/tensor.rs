//! Dense tensors with interior-mutable data and gradient slots.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a shaped buffer. Cloning a tensor
//! clones the handle, not the storage: both handles see the same data and the
//! same gradient. Gradients accumulate across uses within one reverse pass and
//! persist until [`Tensor::zero_grad`].
//!
//! Scalars use the empty shape `[]` (one element).

use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

/// Errors surfaced by tensor construction, operations, and the reverse pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes are inconsistent with each other or with the operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A non-shape argument is out of its valid range.
    InvalidArgument { op: &'static str, detail: String },
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss { numel: usize },
    /// `backward` was called on a tensor that no recorded operation produced.
    DetachedLoss,
    /// `backward` was called a second time on the same tape.
    TapeConsumed,
}

impl core::fmt::Display for TensorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::InvalidArgument { op, detail } => {
                write!(f, "invalid argument to {op}: {detail}")
            }
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            TensorError::DetachedLoss => {
                write!(f, "backward requires a loss produced by a recorded operation")
            }
            TensorError::TapeConsumed => {
                write!(f, "backward already consumed this tape")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

/// Number of elements implied by a shape; the empty shape holds one.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a tensor, unique per process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

struct Inner<T: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// Shaped floating-point buffer with an optional gradient slot.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn new(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Rc::new(Inner {
                id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Constant (non-trainable) tensor from explicit data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: alloc::format!(
                    "data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            });
        }
        Ok(Self::new(data, shape.to_vec(), false))
    }

    /// Trainable leaf from explicit data; gradients will accumulate on it.
    pub fn param_from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        if data.len() != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "param_from_vec",
                detail: alloc::format!(
                    "data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            });
        }
        Ok(Self::new(data, shape.to_vec(), true))
    }

    /// Constant tensor filled with `value`.
    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(vec![value; numel(shape)], shape.to_vec(), false)
    }

    /// Constant tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    /// Scalar constant (shape `[]`).
    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], Vec::new(), false)
    }

    /// Internal constructor for operation outputs.
    pub(crate) fn output(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self::new(data, shape, requires_grad)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Shared view of the data. Do not hold across calls that mutate it.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    /// Copy of the data.
    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Mutate the data in place (parameter updates, pixel clamping).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(self.inner.data.borrow_mut().as_mut_slice())
    }

    /// Replace the data wholesale; the length must match the shape.
    pub fn set_data(&self, data: Vec<T>) -> Result<(), TensorError> {
        if data.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_data",
                detail: alloc::format!(
                    "data length {} does not match shape {:?}",
                    data.len(),
                    self.shape()
                ),
            });
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Copy of the accumulated gradient, if any has been produced.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Run `f` over (data, grad) without copying; no-op if no gradient.
    pub fn apply_grad(&self, f: impl FnOnce(&mut [T], &[T])) {
        let grad = self.inner.grad.borrow();
        if let Some(g) = grad.as_ref() {
            f(self.inner.data.borrow_mut().as_mut_slice(), g.as_slice());
        }
    }

    /// Drop any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate `delta` into the gradient slot (allocating zeros first).
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Seed the gradient slot (used for the loss at the start of backward).
    pub(crate) fn seed_grad(&self, value: T) {
        *self.inner.grad.borrow_mut() = Some(vec![value; self.numel()]);
    }

    /// Take the gradient out of the slot, leaving it empty.
    pub(crate) fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow_mut().take()
    }
}

impl<T: Scalar> core::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
