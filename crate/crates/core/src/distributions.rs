//! Densities, normalizers and exact samplers for the families used by the
//! factorization models.
//!
//! Parameterizations follow the usual Bayesian NMF conventions:
//!
//! * `N(x | mu, 1/tau)` is a Gaussian written with its *precision* `tau`.
//! * `G(x | alpha, beta)` is a Gamma with shape `alpha` and **rate** `beta`.
//! * `IG(x | alpha, beta)` is an inverse-Gamma with shape `alpha` and **scale** `beta`.
//! * `E(x | lambda)` is an exponential with rate `lambda`.
//! * `TN(x | mu, 1/tau)` is a Gaussian restricted to `x >= 0` and renormalized.
//!   `mu` and `tau` are its *parent* mean and precision.
//! * `RN(x | mu, 1/tau, lambda) = N(x | mu, 1/tau) E(x | lambda) / C(mu, tau, lambda)`
//!   is the rectified normal. It is a TN with parent mean `(tau mu - lambda) / tau`.
//!
//! The truncated normal and the rectified normal are kept as distinct types even
//! though every RN is a TN in disguise; [`RnParams::to_tn`] performs the reduction.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Lower bound applied to precisions and rates before they are used.
pub const PARAM_FLOOR: f64 = 1e-12;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Clamps a strictly positive parameter at [`PARAM_FLOOR`].
#[inline]
pub fn floor_positive(x: f64) -> f64 {
    if x < PARAM_FLOOR {
        PARAM_FLOOR
    } else {
        x
    }
}

fn check_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be finite, got {x}")))
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    check_finite(name, x)?;
    if x > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be > 0, got {x}")))
    }
}

/// Standard normal CDF, `Phi(x) = erfc(-x / sqrt 2) / 2`.
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    check_finite("x", x)?;
    Ok(phi_cdf(x))
}

#[inline]
fn phi_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `ln Phi(x)`, accurate far into the lower tail.
pub fn std_normal_log_cdf(x: f64) -> Result<f64> {
    check_finite("x", x)?;
    Ok(log_phi_cdf(x))
}

fn log_phi_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return phi_cdf(x).ln();
    }
    // Mills-ratio asymptotic series; erfc underflows past x ~ -37.
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + series.ln()
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Gaussian with mean and precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mean: f64,
    pub precision: f64,
}

impl GaussianParams {
    pub fn new(mean: f64, precision: f64) -> Result<Self> {
        check_finite("mean", mean)?;
        check_positive("precision", precision)?;
        Ok(Self { mean, precision })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let tau = floor_positive(self.precision);
        0.5 * tau.ln() - LN_SQRT_2PI - 0.5 * tau * (x - self.mean).powi(2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + z / floor_positive(self.precision).sqrt()
    }
}

/// Truncated normal on `[0, inf)` with parent mean and parent precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TnParams {
    pub parent_mean: f64,
    pub parent_precision: f64,
}

impl TnParams {
    pub fn new(parent_mean: f64, parent_precision: f64) -> Result<Self> {
        check_finite("parent_mean", parent_mean)?;
        check_positive("parent_precision", parent_precision)?;
        Ok(Self {
            parent_mean,
            parent_precision,
        })
    }

    /// Builds from a parent mean and a parent *variance*.
    pub fn from_variance(parent_mean: f64, parent_variance: f64) -> Result<Self> {
        check_positive("parent_variance", parent_variance)?;
        Self::new(parent_mean, 1.0 / parent_variance)
    }

    pub fn parent_variance(&self) -> f64 {
        1.0 / floor_positive(self.parent_precision)
    }

    pub fn parent_sd(&self) -> f64 {
        self.parent_variance().sqrt()
    }
}

/// Rectified normal: `N(x | mu, 1/tau) * E(x | lambda)` renormalized on `[0, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnParams {
    pub parent_mean: f64,
    pub parent_precision: f64,
    pub rate: f64,
}

impl RnParams {
    pub fn new(parent_mean: f64, parent_precision: f64, rate: f64) -> Result<Self> {
        check_finite("parent_mean", parent_mean)?;
        check_positive("parent_precision", parent_precision)?;
        check_positive("rate", rate)?;
        Ok(Self {
            parent_mean,
            parent_precision,
            rate,
        })
    }

    /// Parent mean of the equivalent truncated normal, `(tau mu - lambda) / tau`.
    pub fn shifted_mean(&self) -> f64 {
        let tau = floor_positive(self.parent_precision);
        (tau * self.parent_mean - floor_positive(self.rate)) / tau
    }

    pub fn to_tn(&self) -> TnParams {
        TnParams {
            parent_mean: self.shifted_mean(),
            parent_precision: floor_positive(self.parent_precision),
        }
    }
}

/// Gamma with shape and rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        check_positive("shape", shape)?;
        check_positive("rate", rate)?;
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }
}

/// Inverse-Gamma with shape and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        check_positive("shape", shape)?;
        check_positive("scale", scale)?;
        Ok(Self { shape, scale })
    }

    /// Defined for `shape > 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }
}

/// Closed-form normalizer `C(mu, tau, lambda)` of the rectified normal, i.e.
/// `int_0^inf N(x | mu, 1/tau) E(x | lambda) dx`.
pub fn rn_normalizer(p: &RnParams) -> Result<f64> {
    Ok(rn_log_normalizer(p)?.exp())
}

/// `ln C(mu, tau, lambda)`, computed without forming `Phi` of a tail argument
/// in linear space.
pub fn rn_log_normalizer(p: &RnParams) -> Result<f64> {
    let p = RnParams::new(p.parent_mean, p.parent_precision, p.rate)?;
    let tau = floor_positive(p.parent_precision);
    let lambda = floor_positive(p.rate);
    let mu = p.parent_mean;
    // 1 - Phi(-x) == Phi(x)
    let arg = (tau * mu - lambda) / tau.sqrt();
    Ok(lambda.ln() + log_phi_cdf(arg) - mu * lambda + lambda * lambda / (2.0 * tau))
}

/// Log density of the truncated normal; `-inf` below zero.
pub fn tn_log_density(x: f64, p: &TnParams) -> Result<f64> {
    let p = TnParams::new(p.parent_mean, p.parent_precision)?;
    if x < 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let tau = floor_positive(p.parent_precision);
    let log_mass = log_phi_cdf(p.parent_mean * tau.sqrt());
    Ok(0.5 * tau.ln() - LN_SQRT_2PI - 0.5 * tau * (x - p.parent_mean).powi(2) - log_mass)
}

pub fn tn_density(x: f64, p: &TnParams) -> Result<f64> {
    Ok(tn_log_density(x, p)?.exp())
}

/// Log density of the rectified normal, `N(x | mu, 1/tau) E(x | lambda) / C`.
///
/// The `mu lambda` and `lambda^2 / (2 tau)` terms of `ln C` cancel against the
/// expanded exponent, leaving the truncated-normal form in the shifted mean;
/// it is evaluated in that form so large parameters do not lose digits.
pub fn rn_log_density(x: f64, p: &RnParams) -> Result<f64> {
    let p = RnParams::new(p.parent_mean, p.parent_precision, p.rate)?;
    tn_log_density(x, &p.to_tn())
}

pub fn rn_density(x: f64, p: &RnParams) -> Result<f64> {
    Ok(rn_log_density(x, p)?.exp())
}

/// Draws from a truncated normal on `[0, inf)`.
///
/// A parent mean at or above zero uses plain Gaussian rejection, which accepts
/// at least half of all proposals. Below zero the standardized lower bound
/// `a = -mu / sigma` is positive and an exponential proposal shifted to `a`
/// (Robert, 1995) is used, which keeps the expected number of trials bounded
/// however deep into the tail the bound sits.
pub fn sample_tn<R: Rng + ?Sized>(p: &TnParams, rng: &mut R) -> f64 {
    let mu = p.parent_mean;
    let sigma = p.parent_sd();
    if mu >= 0.0 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let x = mu + sigma * z;
            if x >= 0.0 {
                return x;
            }
        }
    }
    let a = -mu / sigma;
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let excess = e / rate;
        let z = a + excess;
        let accept = (-0.5 * (z - rate) * (z - rate)).exp();
        let u: f64 = rng.random();
        if u <= accept {
            // mu + sigma * z == sigma * (z - a); written this way to avoid
            // cancellation when mu is hugely negative.
            return sigma * excess;
        }
    }
}

/// Draws from the rectified normal through its truncated-normal form.
pub fn sample_rn<R: Rng + ?Sized>(p: &RnParams, rng: &mut R) -> f64 {
    sample_tn(&p.to_tn(), rng)
}

/// Gamma draw (shape, rate).
pub fn sample_gamma<R: Rng + ?Sized>(p: &GammaParams, rng: &mut R) -> f64 {
    let scale = 1.0 / floor_positive(p.rate);
    let g = rand_distr::Gamma::new(p.shape, scale)
        .expect("GammaParams invariants guarantee a valid Gamma");
    g.sample(rng)
}

/// Inverse-Gamma draw (shape, scale) as `scale / Gamma(shape, 1)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(p: &InvGammaParams, rng: &mut R) -> f64 {
    let g = rand_distr::Gamma::new(p.shape, 1.0)
        .expect("InvGammaParams invariants guarantee a valid Gamma");
    p.scale / g.sample(rng)
}

/// Exponential draw with the given rate.
pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e / floor_positive(rate)
}

/// Analytic truncated-normal mean, `mu + sigma phi(alpha) / (1 - Phi(alpha))`
/// with `alpha = -mu / sigma`.
pub fn tn_mean(p: &TnParams) -> f64 {
    let sigma = p.parent_sd();
    let alpha = -p.parent_mean / sigma;
    if alpha > 5.0 {
        return sigma * hazard_excess(alpha);
    }
    // phi(alpha) / Phi(-alpha) in log space
    let hazard = (-0.5 * alpha * alpha - LN_SQRT_2PI - log_phi_cdf(-alpha)).exp();
    p.parent_mean + sigma * hazard
}

/// `phi(a) / Phi(-a) - a` for large `a`, from the Mills-ratio continued
/// fraction `1 / (a + 2 / (a + 3 / (a + ...)))`. Avoids the cancellation of
/// subtracting `a` from the hazard.
fn hazard_excess(a: f64) -> f64 {
    let mut tail = a;
    for n in (2..80).rev() {
        tail = a + n as f64 / tail;
    }
    1.0 / tail
}
