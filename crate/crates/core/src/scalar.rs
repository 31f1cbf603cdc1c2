//! Scalar abstraction: everything numeric is generic over `Scalar`, with
//! f32 used for training and f64 for oracle/reference computation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_scalar {
    ($($t:ty)*) => ($(
        impl Scalar for $t {
            fn from_f64(v: f64) -> Self { v as $t }
            fn to_f64_lossy(self) -> f64 { self as f64 }
        }
    )*)
}

impl_scalar!(f32 f64);
