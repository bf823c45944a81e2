//! Tensor autodiff engine, compact CNN models, and curriculum augmentation
//! math for dataset distillation, usable without the standard library
//! (`alloc` required).
//!
//! The crate is organized bottom-up:
//!
//! * [`scalar`]: the [`scalar::Scalar`] trait abstracting f32/f64.
//! * [`tensor`]: reference-counted dense tensors with gradient slots.
//! * [`tape`]: a per-iteration record of differentiable operations and the
//!   reverse pass that consumes it.
//! * [`ops`]: the differentiable operation set (conv, batch-norm pieces,
//!   bilinear resize, reductions, ...).
//! * [`optim`]: SGD/Adam/AdamW steps and the cosine learning-rate schedule.
//! * [`nn`]: layers, model builders, losses, and checkpointable state.
//! * [`augment`]: curriculum crop scheduling and crop/flip/cutout transforms.
//! * [`rng`]: seed-stream derivation so each consumer of randomness gets an
//!   independent, reproducible stream.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::{Tensor, TensorError};
