use num_traits::{Float, NumAssignOps};

/// Floating-point scalar the tensor engine is generic over.
///
/// The engine itself never assumes a width; concrete aliases at the crate
/// root pin the training/testing precision to f64.
pub trait Scalar:
    Float + NumAssignOps + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}
