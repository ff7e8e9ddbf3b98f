//! Incremental object counting at desk scale: a shared convolutional
//! feature extractor with frozen per-task counter heads and cascaded
//! cross-task adaptors, trained with the DM-Count loss and protected
//! against forgetting by density-map distillation and baseline
//! continual-learning regularizers.

pub mod continual;
pub mod data;
pub mod error;
pub mod loss;
pub mod network;
pub mod sinkhorn;

pub use error::CoreError;

pub type Result<T> = std::result::Result<T, CoreError>;
