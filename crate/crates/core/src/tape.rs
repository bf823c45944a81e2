//! Wengert-list recording of differentiable operations and the reverse pass.
//!
//! Each training iteration builds a fresh [`Tape`]. Operations in [`crate::ops`]
//! record an entry only when recording is on and at least one input requires a
//! gradient. [`Tape::backward`] walks the entries once in reverse, accumulates
//! gradients into every tensor on the path to the loss, and consumes the tape;
//! a second call is an error.

use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use crate::augment::CropParams;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// One recorded operation: the tensors involved plus the attributes the
/// backward rule needs. Tensor fields are handles, so holding them here keeps
/// activation data alive exactly until the tape is consumed.
pub(crate) enum TapeOp<T: Scalar> {
    Add { a: Tensor<T>, b: Tensor<T>, out: Tensor<T> },
    Sub { a: Tensor<T>, b: Tensor<T>, out: Tensor<T> },
    Mul { a: Tensor<T>, b: Tensor<T>, out: Tensor<T> },
    Scale { x: Tensor<T>, c: T, out: Tensor<T> },
    Matmul { a: Tensor<T>, b: Tensor<T>, out: Tensor<T> },
    BiasAdd { x: Tensor<T>, bias: Tensor<T>, out: Tensor<T> },
    Conv2d { x: Tensor<T>, w: Tensor<T>, out: Tensor<T>, stride: usize, pad: usize },
    Relu { x: Tensor<T>, out: Tensor<T> },
    AvgPool2d { x: Tensor<T>, out: Tensor<T>, k: usize, stride: usize },
    Reshape { x: Tensor<T>, out: Tensor<T> },
    Normalize {
        x: Tensor<T>,
        mean: Tensor<T>,
        var: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        out: Tensor<T>,
        eps: T,
    },
    ChannelMean { x: Tensor<T>, out: Tensor<T> },
    ChannelVar { x: Tensor<T>, mean: Tensor<T>, out: Tensor<T> },
    LogSoftmax { x: Tensor<T>, out: Tensor<T> },
    BilinearResize { x: Tensor<T>, out: Tensor<T> },
    CropResize { x: Tensor<T>, out: Tensor<T>, params: Vec<CropParams> },
    Crop { x: Tensor<T>, out: Tensor<T>, top: usize, left: usize },
    Pad { x: Tensor<T>, out: Tensor<T>, pad: usize },
    Sum { x: Tensor<T>, out: Tensor<T> },
    MeanAll { x: Tensor<T>, out: Tensor<T> },
    L2Norm { x: Tensor<T>, out: Tensor<T> },
}

impl<T: Scalar> TapeOp<T> {
    fn output(&self) -> &Tensor<T> {
        match self {
            TapeOp::Add { out, .. }
            | TapeOp::Sub { out, .. }
            | TapeOp::Mul { out, .. }
            | TapeOp::Scale { out, .. }
            | TapeOp::Matmul { out, .. }
            | TapeOp::BiasAdd { out, .. }
            | TapeOp::Conv2d { out, .. }
            | TapeOp::Relu { out, .. }
            | TapeOp::AvgPool2d { out, .. }
            | TapeOp::Reshape { out, .. }
            | TapeOp::Normalize { out, .. }
            | TapeOp::ChannelMean { out, .. }
            | TapeOp::ChannelVar { out, .. }
            | TapeOp::LogSoftmax { out, .. }
            | TapeOp::BilinearResize { out, .. }
            | TapeOp::CropResize { out, .. }
            | TapeOp::Crop { out, .. }
            | TapeOp::Pad { out, .. }
            | TapeOp::Sum { out, .. }
            | TapeOp::MeanAll { out, .. }
            | TapeOp::L2Norm { out, .. } => out,
        }
    }
}

/// Per-iteration operation record.
pub struct Tape<T: Scalar> {
    entries: RefCell<Vec<TapeOp<T>>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl<T: Scalar> Tape<T> {
    /// Tape that records operations for a later reverse pass.
    pub fn new() -> Self {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// Tape that records nothing; use for evaluation so forward passes have
    /// no autodiff overhead and produce gradient-free outputs.
    pub fn inference() -> Self {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    /// Drop all entries without running backward.
    pub fn reset(&self) {
        self.entries.borrow_mut().clear();
        self.consumed.set(false);
    }

    pub(crate) fn record(&self, op: TapeOp<T>) {
        debug_assert!(self.recording);
        self.entries.borrow_mut().push(op);
    }

    /// Reverse pass from `loss` (a scalar produced by this tape). Gradients
    /// accumulate into every tensor between the loss and the leaves; tensors
    /// off the loss path are skipped. Consumes the entries.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<(), TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss { numel: loss.numel() });
        }
        let entries = self.entries.take();
        self.consumed.set(true);
        if !entries.iter().any(|e| e.output().id() == loss.id()) {
            return Err(TensorError::DetachedLoss);
        }
        loss.seed_grad(T::one());
        for entry in entries.iter().rev() {
            // By reverse order, every consumer of this output was already
            // visited, so the output gradient is final and can be taken,
            // freeing intermediate gradient memory as the pass proceeds.
            let Some(g_out) = entry.output().take_grad() else {
                continue;
            };
            ops::backward_entry(entry, &g_out);
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}
