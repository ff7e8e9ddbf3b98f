//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The operator set is deliberately small: 2-D convolution, a handful of
//! elementwise ops, scalar reductions, and an optimizer. Forward passes are
//! recorded on an explicit [`Graph`] tape; [`Graph::backward`] replays the
//! tape in reverse and accumulates gradients into every reachable tensor
//! that requires them. One tape supports exactly one backward pass.
//!
//! Storage is `f64` by default; the whole engine is generic over
//! [`Scalar`], so `f32` is available where speed matters more than
//! gradient-check headroom.

mod adam;
mod error;
mod graph;
mod scalar;
mod tensor;

pub mod gradcheck;

pub use adam::{Adam, AdamConfig};
pub use error::TensorError;
pub use graph::Graph;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
