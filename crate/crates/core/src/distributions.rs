//! Normal and Gamma log-densities, their gradients, moment formulas and
//! seeded samplers.
//!
//! The checked entry points validate parameters and return [`Result`]; the
//! `*_unchecked` variants are the hot-path kernels used by the log-posterior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_gamma, LN_SQRT_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub std: f64,
}

impl NormalParams {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        let p = Self { mean, std };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.std.is_finite() {
            return Err(Error::NonFinite("normal parameters"));
        }
        if self.std <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "normal std must be > 0, got {}",
                self.std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = Self { shape, rate };
        p.validate()?;
        Ok(p)
    }

    /// Moment matching: the Gamma with the given mean and variance.
    pub fn from_moments(mean: f64, variance: f64) -> Result<Self> {
        Self::new(mean * mean / variance, mean / variance)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shape.is_finite() || !self.rate.is_finite() {
            return Err(Error::NonFinite("gamma parameters"));
        }
        if self.shape <= 0.0 || self.rate <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "gamma shape and rate must be > 0, got shape={} rate={}",
                self.shape, self.rate
            )));
        }
        Ok(())
    }
}

/// Partial derivatives of the Normal log-density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalGrad {
    pub dx: f64,
    pub dmean: f64,
    pub dstd: f64,
}

/// Partial derivatives of the Gamma log-density with respect to the variate
/// and the rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaGrad {
    pub dx: f64,
    pub drate: f64,
}

#[inline]
pub fn normal_logpdf_unchecked(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - LN_SQRT_2PI
}

pub fn normal_logpdf(x: f64, p: NormalParams) -> Result<f64> {
    p.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("normal variate"));
    }
    Ok(normal_logpdf_unchecked(x, p.mean, p.std))
}

pub fn normal_logpdf_grad(x: f64, p: NormalParams) -> Result<NormalGrad> {
    p.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("normal variate"));
    }
    let r = x - p.mean;
    let var = p.std * p.std;
    Ok(NormalGrad {
        dx: -r / var,
        dmean: r / var,
        dstd: r * r / (var * p.std) - 1.0 / p.std,
    })
}

#[inline]
pub fn gamma_logpdf_unchecked(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn gamma_logpdf(x: f64, p: GammaParams) -> Result<f64> {
    p.validate()?;
    check_gamma_support(x)?;
    Ok(gamma_logpdf_unchecked(x, p.shape, p.rate))
}

pub fn gamma_logpdf_grad(x: f64, p: GammaParams) -> Result<GammaGrad> {
    p.validate()?;
    check_gamma_support(x)?;
    Ok(GammaGrad {
        dx: (p.shape - 1.0) / x - p.rate,
        drate: p.shape / p.rate - x,
    })
}

fn check_gamma_support(x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite("gamma variate"));
    }
    if x <= 0.0 {
        return Err(Error::Domain {
            what: "gamma variate",
            value: x,
            domain: "(0, inf)",
        });
    }
    Ok(())
}

/// `(mean, variance)` of a Gamma variable: `shape/rate` and `shape/rate²`.
pub fn gamma_moments(p: GammaParams) -> Result<(f64, f64)> {
    p.validate()?;
    Ok((p.shape / p.rate, p.shape / (p.rate * p.rate)))
}

/// Inverse CDF of a Gamma distribution at probability `q`.
pub fn gamma_quantile(q: f64, p: GammaParams) -> Result<f64> {
    p.validate()?;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain {
            what: "probability",
            value: q,
            domain: "[0, 1]",
        });
    }
    let dist = statrs::distribution::Gamma::new(p.shape, p.rate)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(statrs::distribution::ContinuousCDF::inverse_cdf(&dist, q))
}

pub fn sample_normal<R: Rng + ?Sized>(p: NormalParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    p.mean + p.std * z
}

/// Marsaglia–Tsang squeeze sampler; shapes below one are boosted through
/// `Gamma(shape + 1) · U^(1/shape)`.
pub fn sample_gamma<R: Rng + ?Sized>(p: GammaParams, rng: &mut R) -> f64 {
    if p.shape < 1.0 {
        let boosted = sample_standard_gamma(p.shape + 1.0, rng);
        let u: f64 = rng.random();
        return boosted * u.powf(1.0 / p.shape) / p.rate;
    }
    sample_standard_gamma(p.shape, rng) / p.rate
}

fn sample_standard_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}
