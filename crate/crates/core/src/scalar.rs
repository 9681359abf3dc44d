//! Floating point abstraction shared by every model in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Real scalar used for potentials, weights, probabilities and fitted
/// parameters: `f32` or `f64`.
///
/// Besides the `num-traits` float surface it carries the two special
/// functions the models need (`erf`/`erfc`) and the two primitive draws
/// (uniform on `[0, 1)` and standard normal), so generic code never has to
/// spell out `rand_distr` bounds.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn erf(self) -> Self;
    fn erfc(self) -> Self;
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Converts an `f64` literal. Infallible for the two implementors.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Standard normal CDF.
    #[inline]
    fn norm_cdf(self) -> Self {
        Self::lit(0.5) * (-self / Self::SQRT_2()).erfc()
    }

    /// `ln Φ(z)`, accurate deep into the lower tail.
    fn ln_norm_cdf(self) -> Self {
        let z = self;
        if z > Self::lit(-30.0) {
            let p = z.norm_cdf();
            if p > Self::zero() {
                return p.ln();
            }
        }
        // Mills-ratio expansion: Φ(z) ≈ φ(z)/|z| · (1 − 1/z² + 3/z⁴)
        let z2 = z * z;
        let series = Self::one() - z2.recip() + Self::lit(3.0) / (z2 * z2);
        -z2 / Self::lit(2.0) - (-z).ln() - Self::lit(0.5) * (Self::lit(2.0) * Self::PI()).ln() + series.ln()
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
    #[inline]
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
    #[inline]
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
    #[inline]
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
    #[inline]
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Bernoulli draw with a scalar probability. `p <= 0` never fires and
/// `p >= 1` always fires without consuming randomness.
#[inline]
pub fn bernoulli<T: Scalar, R: Rng + ?Sized>(p: T, rng: &mut R) -> bool {
    if p <= T::zero() {
        false
    } else if p >= T::one() {
        true
    } else {
        T::sample_unit(rng) < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_cdf_reference_points() {
        assert!((0.0f64.norm_cdf() - 0.5).abs() < 1e-15);
        // Φ(1.96) from tables
        assert!((1.96f64.norm_cdf() - 0.975_002_104_851_780).abs() < 1e-12);
        assert!((1.96f32.norm_cdf() - 0.975_002_1).abs() < 1e-6);
    }

    #[test]
    fn ln_norm_cdf_is_continuous_across_the_tail_switch() {
        let inside = (-29.999f64).ln_norm_cdf();
        let outside = (-30.001f64).ln_norm_cdf();
        assert!((inside - outside).abs() < 0.1);
        assert!((-40.0f64).ln_norm_cdf().is_finite());
        assert!((-40.0f64).ln_norm_cdf() < (-39.0f64).ln_norm_cdf());
    }

    #[test]
    fn bernoulli_extremes_do_not_touch_rng() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut b = a.clone();
        assert!(bernoulli(1.0f64, &mut a));
        assert!(!bernoulli(0.0f64, &mut a));
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
