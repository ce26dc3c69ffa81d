use core::fmt::{Debug, Display};

use num_traits::Float;

/// Floating point element type. `f32` is the training default; `f64` gives
/// finite-difference checks enough headroom.
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
