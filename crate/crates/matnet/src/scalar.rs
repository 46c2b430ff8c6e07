use std::fmt;

/// Floating-point element type for tensors.
///
/// Training runs in `f32`; gradient checking instantiates the same code in
/// `f64` because central finite differences drown in `f32` rounding noise.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
