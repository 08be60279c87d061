//! Floating-point abstraction the rest of the crate is generic over.
//!
//! Everything numeric works for both `f32` and `f64`; pick via the type
//! aliases at the crate root. `f64` is the default used by the pipeline and
//! the CLI.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float + NumAssign + Sum + Serialize + DeserializeOwned + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; identity for `f64`.
    fn cast(v: f64) -> Self;

    /// Widening conversion to `f64`; identity for `f64`.
    fn as_f64(self) -> f64;

    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw from the half-open interval `[lo, hi)`.
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Scalar for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }
}

impl Scalar for f64 {
    fn cast(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn cast_round_trip_is_exact_for_representable_values() {
        assert_eq!(<f64 as Scalar>::cast(0.25), 0.25);
        assert_eq!(<f32 as Scalar>::cast(0.25), 0.25f32);
        assert_eq!(Scalar::as_f64(0.25f32), 0.25);
    }

    #[test]
    fn uniform_draws_stay_in_range() {
        let mut rng = rng_from_seed(7);
        for _ in 0..1000 {
            let v = f64::uniform(&mut rng, -2.0, 3.0);
            assert!((-2.0..3.0).contains(&v));
        }
    }

    #[test]
    fn same_seed_gives_same_normal_stream_per_type() {
        let mut a = rng_from_seed(42);
        let mut b = rng_from_seed(42);
        for _ in 0..100 {
            assert_eq!(f64::standard_normal(&mut a), f64::standard_normal(&mut b));
        }
    }
}
