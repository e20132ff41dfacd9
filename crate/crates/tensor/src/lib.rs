//! Dense CPU tensors with tape-free reverse-mode differentiation.
//!
//! Tensors are immutable; every operation allocates its result and, while
//! gradients are enabled, remembers its inputs. [`Tensor::backward`] walks
//! that graph in reverse topological order and returns a [`GradStore`] with
//! gradients for every variable leaf. The element type is generic over
//! [`Float`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference checks.

mod backprop;
mod error;
mod float;
mod ops;
mod param;
mod shape;
mod tensor;

pub mod gradcheck;

pub use backprop::GradStore;
pub use error::{Result, TensorError};
pub use float::Float;
pub use param::{Init, Param, ParamBuilder, ParamStore};
pub use shape::Shape;
pub use tensor::{grad_enabled, no_grad, Conv2dCfg, ConvMode, Tensor};
