//! Scalar abstraction for the numeric kernels: f32 or f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast};

/// Floating-point scalar the numeric kernels are generic over.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + NumCast + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy cast from any numeric type.
    fn cast<T: NumCast>(x: T) -> Self {
        NumCast::from(x).expect("numeric cast")
    }

    /// Value as f64 (exact for f32/f64).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
