//! A compact reverse-mode automatic differentiation engine over dense `f64` tensors.
//!
//! Computations are recorded on a [`Tape`] through [`Var`] handles; [`Tape::backward`]
//! returns the gradient of a scalar with respect to every recorded value. Parameters
//! live in a [`ParamStore`] and are bound onto a tape per step.

pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod params;
mod tape;
pub mod tensor;

pub use kernels::{ConvGeometry, StftSpec};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
