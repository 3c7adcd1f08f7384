//! Black-76 pricing and implied-volatility inversion.
//!
//! Prices are computed for the out-of-the-money side and mapped to the
//! in-the-money side through put-call parity, so OTM prices keep full
//! relative precision far into the wings. Inversion runs a bracketed Newton
//! iteration on the logarithm of the OTM price.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::OptionType;

const MAX_ITERATIONS: usize = 200;
const VOL_CEILING: f64 = 100.0;

/// Standard normal CDF, via `erfc` so both tails keep relative accuracy.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlackInputs {
    pub forward: f64,
    pub strike: f64,
    pub tau: f64,
    pub discount_factor: f64,
    pub option_type: OptionType,
}

impl BlackInputs {
    pub fn new(forward: f64, strike: f64, tau: f64, discount_factor: f64, option_type: OptionType) -> Result<Self> {
        let inputs = Self { forward, strike, tau, discount_factor, option_type };
        inputs.validate()?;
        Ok(inputs)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.forward, self.strike, self.tau, self.discount_factor]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.forward <= 0.0
            || self.strike <= 0.0
            || self.tau <= 0.0
            || self.discount_factor <= 0.0
            || self.discount_factor > 1.0
        {
            return Err(Error::Domain(format!("invalid Black inputs {self:?}")));
        }
        Ok(())
    }

    /// Discounted intrinsic value.
    pub fn intrinsic(&self) -> f64 {
        let payoff = match self.option_type {
            OptionType::Call => self.forward - self.strike,
            OptionType::Put => self.strike - self.forward,
        };
        self.discount_factor * payoff.max(0.0)
    }

    /// Price as the volatility goes to infinity.
    pub fn upper_bound(&self) -> f64 {
        match self.option_type {
            OptionType::Call => self.discount_factor * self.forward,
            OptionType::Put => self.discount_factor * self.strike,
        }
    }

    /// The option type that is out of the money (call at the money).
    fn otm_type(&self) -> OptionType {
        if self.strike >= self.forward {
            OptionType::Call
        } else {
            OptionType::Put
        }
    }
}

/// Undiscounted price of the OTM option for total standard deviation `sd`.
fn otm_undiscounted(forward: f64, strike: f64, sd: f64, otm: OptionType) -> f64 {
    let x = (forward / strike).ln();
    let d1 = x / sd + 0.5 * sd;
    let d2 = d1 - sd;
    let price = match otm {
        OptionType::Call => forward * norm_cdf(d1) - strike * norm_cdf(d2),
        OptionType::Put => strike * norm_cdf(-d2) - forward * norm_cdf(-d1),
    };
    price.max(0.0)
}

/// Black-76 price.
pub fn black_price(inputs: &BlackInputs, vol: f64) -> Result<f64> {
    inputs.validate()?;
    if !(vol.is_finite() && vol > 0.0) {
        return Err(Error::Domain(format!("volatility must be positive, got {vol}")));
    }
    let sd = vol * inputs.tau.sqrt();
    let otm = inputs.otm_type();
    let time_value = inputs.discount_factor * otm_undiscounted(inputs.forward, inputs.strike, sd, otm);
    Ok(time_value + inputs.intrinsic())
}

/// Vega, dPrice/dVol.
pub fn black_vega(inputs: &BlackInputs, vol: f64) -> f64 {
    let sqrt_t = inputs.tau.sqrt();
    let sd = vol * sqrt_t;
    let d1 = (inputs.forward / inputs.strike).ln() / sd + 0.5 * sd;
    inputs.discount_factor * inputs.forward * norm_pdf(d1) * sqrt_t
}

/// Invert a Black-76 price for its implied volatility.
pub fn implied_vol(inputs: &BlackInputs, price: f64) -> Result<f64> {
    inputs.validate()?;
    let lower = inputs.intrinsic();
    let upper = inputs.upper_bound();
    if !price.is_finite() || price <= lower || price >= upper {
        return Err(Error::OutOfBounds { price, lower, upper });
    }
    let df = inputs.discount_factor;
    let otm = inputs.otm_type();
    // Time value in undiscounted OTM terms.
    let target = (price - lower) / df;
    if !(target > 0.0) {
        return Err(Error::OutOfBounds { price, lower, upper });
    }
    let ln_target = target.ln();
    let (f, k) = (inputs.forward, inputs.strike);
    let sqrt_t = inputs.tau.sqrt();
    let objective = |vol: f64| otm_undiscounted(f, k, vol * sqrt_t, otm).ln() - ln_target;

    let mut lo = 1e-8;
    let mut hi = 1.0;
    while objective(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > VOL_CEILING {
            return Err(Error::OutOfBounds { price, lower, upper });
        }
    }

    // Start at the vol where d log(price)/d vol is best conditioned, clamped into the bracket.
    let x = (f / k).ln().abs();
    let mut vol = ((2.0 * x / inputs.tau).sqrt()).max(0.2).clamp(lo, hi);
    for _ in 0..MAX_ITERATIONS {
        let g = objective(vol);
        if g == 0.0 {
            return Ok(vol);
        }
        if g < 0.0 {
            lo = vol;
        } else {
            hi = vol;
        }
        let otm_price = otm_undiscounted(f, k, vol * sqrt_t, otm);
        let sd = vol * sqrt_t;
        let d1 = (f / k).ln() / sd + 0.5 * sd;
        let vega = f * norm_pdf(d1) * sqrt_t;
        let mut next = if otm_price > 0.0 && vega > 0.0 {
            vol - g * otm_price / vega
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - vol).abs() <= 1e-15 * vol || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next);
        }
        vol = next;
    }
    Err(Error::NoConvergence { iterations: MAX_ITERATIONS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(f: f64, k: f64, tau: f64, ty: OptionType) -> BlackInputs {
        BlackInputs::new(f, k, tau, 1.0, ty).unwrap()
    }

    /// Composite Simpson quadrature of E[(F exp(sZ - s^2/2) - K)^+] over a standard normal Z.
    fn quadrature_call(f: f64, k: f64, sd: f64) -> f64 {
        // Integrate from the exercise boundary so the integrand is smooth.
        let n = 200_000;
        let (a, b) = (((k / f).ln() + 0.5 * sd * sd) / sd, 12.0);
        let h = (b - a) / n as f64;
        let integrand = |z: f64| (f * (sd * z - 0.5 * sd * sd).exp() - k).max(0.0) * norm_pdf(z);
        let mut acc = integrand(a) + integrand(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn zero_vol_limits_are_intrinsic() {
        let atm = inputs(100.0, 100.0, 1.0, OptionType::Call);
        assert!(black_price(&atm, 1e-12).unwrap() < 1e-9);
        let itm = inputs(100.0, 80.0, 1.0, OptionType::Call);
        assert!((black_price(&itm, 1e-12).unwrap() - 20.0).abs() < 1e-12);
        assert!(black_price(&itm, 0.0).is_err());
    }

    #[test]
    fn atm_price_matches_quadrature_and_high_precision_value() {
        let atm = inputs(100.0, 100.0, 1.0, OptionType::Call);
        let closed = black_price(&atm, 0.2).unwrap();
        // 100 (2 N(0.1) - 1), evaluated at 40 significant digits.
        assert!((closed - 7.965_567_455_405_797).abs() < 1e-12);
        let quad = quadrature_call(100.0, 100.0, 0.2);
        assert!((closed - quad).abs() < 1e-9, "closed {closed} quad {quad}");
        let otm = inputs(100.0, 120.0, 0.5, OptionType::Call);
        let quad = quadrature_call(100.0, 120.0, 0.3 * 0.5f64.sqrt());
        assert!((black_price(&otm, 0.3).unwrap() - quad).abs() < 1e-9);
    }

    #[test]
    fn round_trip_simple() {
        let inp = inputs(100.0, 110.0, 0.75, OptionType::Put);
        let p = black_price(&inp, 0.2).unwrap();
        assert!((implied_vol(&inp, p).unwrap() - 0.2).abs() < 1e-8);
    }

    #[test]
    fn below_intrinsic_is_out_of_bounds() {
        let inp = inputs(100.0, 80.0, 1.0, OptionType::Call);
        assert!(matches!(implied_vol(&inp, 19.0), Err(Error::OutOfBounds { .. })));
        assert!(matches!(implied_vol(&inp, 100.0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(BlackInputs::new(f64::NAN, 100.0, 1.0, 1.0, OptionType::Call).is_err());
        assert!(BlackInputs::new(100.0, 100.0, 1.0, 1.5, OptionType::Call).is_err());
        assert!(BlackInputs::new(100.0, -1.0, 1.0, 1.0, OptionType::Call).is_err());
    }

    #[test]
    fn price_is_increasing_in_vol() {
        let inp = inputs(100.0, 90.0, 0.4, OptionType::Call);
        let mut prev = 0.0;
        for i in 5..200 {
            let p = black_price(&inp, i as f64 * 0.01).unwrap();
            assert!(p > prev);
            prev = p;
        }
    }

    proptest! {
        #[test]
        fn put_call_parity(f in 50.0..150.0f64, k in 50.0..150.0f64, tau in 0.01..3.0f64,
                           df in 0.5..1.0f64, vol in 0.05..2.0f64) {
            let c = black_price(&BlackInputs::new(f, k, tau, df, OptionType::Call).unwrap(), vol).unwrap();
            let p = black_price(&BlackInputs::new(f, k, tau, df, OptionType::Put).unwrap(), vol).unwrap();
            prop_assert!((c - p - df * (f - k)).abs() <= 1e-12 * f.max(k));
        }

        #[test]
        fn otm_round_trip(moneyness in 0.5..2.0f64, tau in 0.01..3.0f64, vol in 0.05..2.0f64,
                          df in 0.8..1.0f64) {
            let f = 100.0;
            let k = f / moneyness;
            let ty = if k >= f { OptionType::Call } else { OptionType::Put };
            let inp = BlackInputs::new(f, k, tau, df, ty).unwrap();
            let price = black_price(&inp, vol).unwrap();
            if price > 1e-290 {
                let iv = implied_vol(&inp, price).unwrap();
                prop_assert!((iv - vol).abs() <= 1e-8, "iv {} vol {}", iv, vol);
                let repriced = black_price(&inp, iv).unwrap();
                prop_assert!((repriced - price).abs() <= 1e-10 * df * f);
            } else {
                // The time value has underflowed: no information left to invert.
                prop_assert!(implied_vol(&inp, price).is_err());
            }
        }
    }
}
