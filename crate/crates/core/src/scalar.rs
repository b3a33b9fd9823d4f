//! Floating-point abstraction shared by every numerical module.
//!
//! All vector math (embeddings, similarities, clustering, silhouettes) is
//! written once against [`Scalar`] and instantiated for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + FromStr
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("usize representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

pub fn squared_distance<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| {
        let d = a - b;
        acc + d * d
    })
}

pub fn is_finite_slice<T: Scalar>(u: &[T]) -> bool {
    u.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helpers_agree_across_precisions() {
        let a64 = [3.0_f64, 4.0];
        let a32 = [3.0_f32, 4.0];
        assert_eq!(norm(&a64), 5.0);
        assert_eq!(norm(&a32), 5.0);
        assert_eq!(squared_distance(&a64, &[0.0, 0.0]), 25.0);
        assert_eq!(f32::lit(0.5), 0.5);
    }
}
