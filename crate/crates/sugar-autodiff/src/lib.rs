//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! The tape records f64 tensors with a fixed op vocabulary sized for small
//! graph/attention models: matmul, batched matmul, depthwise temporal
//! convolution, softmax, layer norm, embedding gather, and a couple of fused
//! losses. `check_gradients` compares every analytic gradient against central
//! finite differences, which is how the numeric kernels here are verified.

mod check;
mod error;
mod optim;
mod params;
mod tape;

pub use check::{check_gradients, GradCheckReport};
pub use error::{AutodiffError, Result};
pub use optim::{Adam, Sgd};
pub use params::{backprop, Binding, GradAccum, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
