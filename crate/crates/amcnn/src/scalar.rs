//! Scalar abstraction: all numeric code is generic over [`Scalar`],
//! instantiated as `f32` or `f64` (the crate-root aliases use `f64`).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 constant not representable in scalar type")
}

/// Neumaier-compensated sum. Used wherever a sum feeds a tight
/// tolerance (softmax normalizers, density-map totals).
pub fn compensated_sum<T: Scalar, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp = comp + ((sum - t) + v);
        } else {
            comp = comp + ((v - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let vals = [1.0f64, 1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(vals.iter().copied()), 2.0);
    }

    #[test]
    fn compensated_sum_matches_naive_on_benign_input() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64 * 0.25).collect();
        let naive: f64 = vals.iter().sum();
        assert_eq!(compensated_sum(vals.iter().copied()), naive);
    }
}
