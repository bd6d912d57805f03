//! SABR implied volatility, Black-76 call premiums and their inversion.
//!
//! These generate the ground-truth premium surfaces the network is trained
//! on and convert predicted premiums back to implied volatility for scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moneyness threshold `|ln(F/K)|` below which the at-the-money limit is used.
pub const ATM_LOG_MONEYNESS: f64 = 1e-10;

/// SABR parameters plus the market inputs of the synthetic surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SabrParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub nu: f64,
    /// Forward price.
    pub f: f64,
    /// Risk-free rate.
    pub r: f64,
    /// Dividend yield; only enters through the forward.
    #[serde(default)]
    pub q: f64,
}

impl Default for SabrParams {
    fn default() -> Self {
        SabrParams { alpha: 0.2, beta: 1.0, rho: -0.4, nu: 0.6, f: 1.0, r: 0.04, q: 0.0 }
    }
}

impl SabrParams {
    pub fn with_smile(self, nu: f64, rho: f64) -> Self {
        SabrParams { nu, rho, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.rho, self.nu, self.f, self.r, self.q]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("non-finite SABR parameter in {self:?}")));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Domain(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.rho.abs() >= 1.0 {
            return Err(Error::Domain(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if self.nu < 0.0 {
            return Err(Error::Domain(format!("nu must be nonnegative, got {}", self.nu)));
        }
        if self.f <= 0.0 {
            return Err(Error::Domain(format!("forward must be positive, got {}", self.f)));
        }
        Ok(())
    }

    pub fn discount(&self, tau: f64) -> f64 {
        (-self.r * tau).exp()
    }
}

/// Hagan's lognormal SABR implied volatility.
pub fn sabr_iv(strike: f64, tau: f64, p: &SabrParams) -> Result<f64> {
    p.validate()?;
    if !(strike > 0.0 && strike.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("strike and expiry must be positive, got K={strike}, tau={tau}")));
    }
    let SabrParams { alpha, beta, rho, nu, f, .. } = *p;
    let omb = 1.0 - beta;
    let log_fk = (f / strike).ln();

    if log_fk.abs() < ATM_LOG_MONEYNESS {
        let f_pow = f.powf(omb);
        let correction = omb * omb / 24.0 * alpha * alpha / (f_pow * f_pow)
            + 0.25 * rho * beta * nu * alpha / f_pow
            + (2.0 - 3.0 * rho * rho) / 24.0 * nu * nu;
        return Ok(alpha * (1.0 + correction * tau) / f_pow);
    }

    let fk_pow = (f * strike).powf(0.5 * omb);
    let correction = omb * omb / 24.0 * alpha * alpha / (fk_pow * fk_pow)
        + 0.25 * rho * beta * nu * alpha / fk_pow
        + (2.0 - 3.0 * rho * rho) / 24.0 * nu * nu;
    let l2 = log_fk * log_fk;
    let denom = fk_pow * (1.0 + omb * omb / 24.0 * l2 + omb.powi(4) / 1920.0 * l2 * l2);
    let z = nu / alpha * fk_pow * log_fk;
    Ok(alpha * (1.0 + correction * tau) / denom * z_over_chi(z, rho))
}

/// `z / χ(z)` with `χ(z) = ln((√(1 − 2ρz + z²) + z − ρ) / (1 − ρ))`.
fn z_over_chi(z: f64, rho: f64) -> f64 {
    if z == 0.0 {
        return 1.0;
    }
    if z.abs() < 1e-8 {
        return 1.0 - 0.5 * rho * z + (2.0 - 3.0 * rho * rho) / 12.0 * z * z;
    }
    // (√(1+u) − 1 + z) / (1 − ρ) with u = z² − 2ρz, written without cancellation.
    let u = z * z - 2.0 * rho * z;
    let root_minus_one = u / ((1.0 + u).sqrt() + 1.0);
    let chi = ((root_minus_one + z) / (1.0 - rho)).ln_1p();
    z / chi
}

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn check_black_inputs(forward: f64, strike: f64, rate: f64, tau: f64) -> Result<()> {
    if !(forward > 0.0 && forward.is_finite()) {
        return Err(Error::Domain(format!("forward must be positive, got {forward}")));
    }
    if !(strike >= 0.0 && strike.is_finite()) {
        return Err(Error::Domain(format!("strike must be nonnegative, got {strike}")));
    }
    if !(tau >= 0.0 && tau.is_finite()) || !rate.is_finite() {
        return Err(Error::Domain(format!("invalid rate/expiry r={rate}, tau={tau}")));
    }
    Ok(())
}

/// Black-76 European call premium `e^{-rτ}[F N(d₁) − K N(d₂)]`.
pub fn black_call(forward: f64, strike: f64, rate: f64, tau: f64, sigma: f64) -> Result<f64> {
    check_black_inputs(forward, strike, rate, tau)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("volatility must be nonnegative, got {sigma}")));
    }
    let disc = (-rate * tau).exp();
    if strike == 0.0 {
        return Ok(disc * forward);
    }
    let total_sd = sigma * tau.sqrt();
    if total_sd == 0.0 {
        return Ok(disc * (forward - strike).max(0.0));
    }
    Ok(disc * undiscounted_call(forward, strike, total_sd))
}

/// Black-76 European put premium, computed directly rather than by parity so
/// deep in-the-money calls keep their time value.
pub fn black_put(forward: f64, strike: f64, rate: f64, tau: f64, sigma: f64) -> Result<f64> {
    check_black_inputs(forward, strike, rate, tau)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("volatility must be nonnegative, got {sigma}")));
    }
    let disc = (-rate * tau).exp();
    let total_sd = sigma * tau.sqrt();
    if strike == 0.0 {
        return Ok(0.0);
    }
    if total_sd == 0.0 {
        return Ok(disc * (strike - forward).max(0.0));
    }
    Ok(disc * undiscounted_put(forward, strike, total_sd))
}

/// `∂C/∂σ` of the discounted Black call.
pub fn black_vega(forward: f64, strike: f64, rate: f64, tau: f64, sigma: f64) -> Result<f64> {
    check_black_inputs(forward, strike, rate, tau)?;
    let total_sd = sigma * tau.sqrt();
    if strike == 0.0 || !(total_sd > 0.0) {
        return Ok(0.0);
    }
    let (d1, _) = d1_d2(forward, strike, total_sd);
    Ok((-rate * tau).exp() * forward * norm_pdf(d1) * tau.sqrt())
}

/// Volatility error tolerated when a premium is rounded to `f64`.
pub const IV_RESOLUTION: f64 = 1e-8;

/// Whether the volatility at this point can be recovered from an `f64`
/// premium: a few ulps of premium must move σ by less than [`IV_RESOLUTION`].
/// Deep in-the-money short expiries fail this, their time value is lost.
pub fn iv_identifiable(forward: f64, strike: f64, rate: f64, tau: f64, sigma: f64) -> Result<bool> {
    let price = black_call(forward, strike, rate, tau, sigma)?;
    let vega = black_vega(forward, strike, rate, tau, sigma)?;
    Ok(vega > 0.0 && 4.0 * f64::EPSILON * price < IV_RESOLUTION * vega)
}

fn d1_d2(forward: f64, strike: f64, total_sd: f64) -> (f64, f64) {
    let d1 = (forward / strike).ln() / total_sd + 0.5 * total_sd;
    (d1, d1 - total_sd)
}

fn undiscounted_call(forward: f64, strike: f64, total_sd: f64) -> f64 {
    let (d1, d2) = d1_d2(forward, strike, total_sd);
    forward * norm_cdf(d1) - strike * norm_cdf(d2)
}

fn undiscounted_put(forward: f64, strike: f64, total_sd: f64) -> f64 {
    let (d1, d2) = d1_d2(forward, strike, total_sd);
    strike * norm_cdf(-d2) - forward * norm_cdf(-d1)
}

/// Why a premium has no Black implied volatility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidIv {
    BelowIntrinsic,
    AboveForwardBound,
    NoConvergence,
}

/// Outcome of a Black implied-volatility inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IvResult {
    Valid(f64),
    Invalid(InvalidIv),
}

impl IvResult {
    pub fn sigma(self) -> Option<f64> {
        match self {
            IvResult::Valid(s) => Some(s),
            IvResult::Invalid(_) => None,
        }
    }

    pub fn is_valid(self) -> bool {
        matches!(self, IvResult::Valid(_))
    }
}

/// Bracketed Newton/bisection inversion of the Black call formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvSolver {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub max_iter: usize,
    /// Premium tolerance relative to the discounted forward.
    pub price_tol: f64,
}

impl Default for IvSolver {
    fn default() -> Self {
        IvSolver { sigma_min: 1e-6, sigma_max: 5.0, max_iter: 200, price_tol: 1e-10 }
    }
}

impl IvSolver {
    pub fn solve(&self, price: f64, forward: f64, strike: f64, rate: f64, tau: f64) -> Result<IvResult> {
        check_black_inputs(forward, strike, rate, tau)?;
        if !(strike > 0.0 && tau > 0.0) {
            return Err(Error::Domain(format!("implied vol needs K > 0 and tau > 0, got K={strike}, tau={tau}")));
        }
        if !price.is_finite() {
            return Ok(IvResult::Invalid(InvalidIv::NoConvergence));
        }
        let disc = (-rate * tau).exp();
        let target = price / disc;
        let intrinsic = (forward - strike).max(0.0);
        if target < intrinsic {
            return Ok(IvResult::Invalid(InvalidIv::BelowIntrinsic));
        }
        if target >= forward {
            return Ok(IvResult::Invalid(InvalidIv::AboveForwardBound));
        }

        // Solve on the out-of-the-money side, where the premium is pure time
        // value and keeps full relative precision.
        let use_put = strike < forward;
        let otm_target = if use_put { target - intrinsic } else { target };
        let sqrt_tau = tau.sqrt();
        let otm = |sigma: f64| {
            let sd = sigma * sqrt_tau;
            if use_put {
                undiscounted_put(forward, strike, sd)
            } else {
                undiscounted_call(forward, strike, sd)
            }
        };

        let sigma = match self.root(otm_target, &otm, forward, strike, sqrt_tau) {
            Some(s) => s,
            None => return Ok(IvResult::Invalid(InvalidIv::NoConvergence)),
        };
        let repriced = black_call(forward, strike, rate, tau, sigma)?;
        if (repriced - price).abs() < self.price_tol * disc * forward {
            Ok(IvResult::Valid(sigma))
        } else {
            Ok(IvResult::Invalid(InvalidIv::NoConvergence))
        }
    }

    fn root(&self, target: f64, otm: &impl Fn(f64) -> f64, forward: f64, strike: f64, sqrt_tau: f64) -> Option<f64> {
        if !(target > 0.0) {
            return None;
        }
        let (mut lo, mut hi) = (self.sigma_min, self.sigma_max);
        if otm(lo) > target || otm(hi) < target {
            return None;
        }
        let ln_target = target.ln();
        // Start from the Brenner-Subrahmanyam style ATM guess, clamped into the bracket.
        let mut sigma = (target / (0.4 * forward.max(strike) * sqrt_tau)).clamp(lo, hi);
        for _ in 0..self.max_iter {
            let value = otm(sigma);
            if value == target {
                return Some(sigma);
            }
            if value < target {
                lo = sigma;
            } else {
                hi = sigma;
            }
            // Newton on ln(price), which stays well scaled for tiny premiums.
            let (d1, _) = d1_d2(forward, strike, sigma * sqrt_tau);
            let vega = forward * norm_pdf(d1) * sqrt_tau;
            let mut next = if value > 0.0 && vega > 0.0 {
                sigma - (value.ln() - ln_target) * value / vega
            } else {
                f64::NAN
            };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - sigma).abs() <= 1e-15 * sigma.max(1e-3) || hi - lo <= 1e-15 * hi {
                return Some(next);
            }
            sigma = next;
        }
        None
    }
}

/// Implied Black volatility with the default bracket `[1e-6, 5]`.
pub fn implied_vol_black(price: f64, forward: f64, strike: f64, rate: f64, tau: f64) -> Result<IvResult> {
    IvSolver::default().solve(price, forward, strike, rate, tau)
}
