use std::fmt::{Debug, Display};

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssignOps};

/// Element type of a [`crate::Tensor`]: `f64` (default everywhere) or `f32`.
pub trait Scalar:
    Float + NumAssignOps + LinalgScalar + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}
