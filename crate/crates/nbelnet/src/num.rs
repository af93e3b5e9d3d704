//! Scalar abstraction: the regression core is generic over `f32`/`f64`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

/// Floating-point scalar the crate's numerics run on.
///
/// Besides the arithmetic supplied by `num_traits::Float`, the trait
/// carries the sampling entry points the simulation engine needs, so
/// generic code never has to spell out `rand_distr` bounds.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy cast from `f64`, for literals in generic code.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal converts to Real")
    }

    /// Widen to `f64` (used at reporting boundaries).
    fn to_f64(self) -> f64;

    /// One standard normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw on `[0, 1)`.
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One `Gamma(shape, scale)` draw.
    fn gamma<R: Rng + ?Sized>(shape: Self, scale: Self, rng: &mut R) -> Self;

    /// One Poisson draw with the given rate; `rate <= 0` yields 0.
    fn poisson<R: Rng + ?Sized>(rate: Self, rng: &mut R) -> u64;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.gen::<$t>()
            }

            fn gamma<R: Rng + ?Sized>(shape: Self, scale: Self, rng: &mut R) -> Self {
                Gamma::new(shape, scale)
                    .expect("gamma parameters are validated upstream")
                    .sample(rng)
            }

            fn poisson<R: Rng + ?Sized>(rate: Self, rng: &mut R) -> u64 {
                if rate <= 0.0 {
                    return 0;
                }
                let draw: $t = Poisson::new(rate)
                    .expect("positive finite poisson rate")
                    .sample(rng);
                draw as u64
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
