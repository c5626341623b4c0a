//! Scalar abstraction so the numerical core works at either `f32` or `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar the solver, accountant, and objective are generic over.
///
/// Everything numeric in this crate takes a `T: Scalar`. The two impls are
/// `f32` and `f64`; the crate root exports `f64` aliases for the common case.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant, panicking if the value is not representable.
    /// Intended for literals and small integer counts, which always are.
    fn cast(value: f64) -> Self {
        num_traits::NumCast::from(value).expect("constant not representable in scalar type")
    }

    /// Converts a count to the scalar type. Exact for any count a desk-scale
    /// experiment can reach.
    fn from_count(value: usize) -> Self {
        Self::cast(value as f64)
    }

    /// Draws one standard normal sample from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}
