//! Scalar special functions: log-gamma, the standard normal CDF, its
//! logarithm with a stable lower tail, and its inverse.

use std::f64::consts::SQRT_2;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// Standard normal CDF, via the complementary error function so that the
/// lower tail keeps full relative precision.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / SQRT_2)
}

/// `ln Φ(z)`.
#[inline]
pub fn ln_std_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        std_normal_cdf(z).ln()
    } else {
        // asymptotic tail: Φ(z) ~ φ(z)/|z| (1 - 1/z² + 3/z⁴)
        let z2 = z * z;
        -0.5 * z2 - LN_SQRT_2PI - (-z).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// `φ(z) / Φ(z)`, the derivative of `ln Φ(z)`.
#[inline]
pub fn inverse_mills(z: f64) -> f64 {
    if z > -30.0 {
        std_normal_pdf(z) / std_normal_cdf(z)
    } else {
        // leading terms of the asymptotic expansion
        let z2 = z * z;
        -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2))
    }
}

/// Inverse of the standard normal CDF, through the inverse complementary
/// error function.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}
