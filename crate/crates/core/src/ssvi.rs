//! Surface SVI with the power-law curvature function `phi(theta) = eta * theta^(-gamma)`.
//!
//! The ATM total-variance curve is stored at the calibrated maturities and
//! interpolated linearly. Calibration maps `eta` into the feasible range
//! implied by the two no-butterfly inequalities, so every returned surface
//! satisfies them exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::LevenbergMarquardt;
use crate::types::{distinct_taus, Quote};

/// Largest allowed value of `theta * phi * (1 + |rho|)` and `theta * phi^2 * (1 + |rho|)`.
pub const ARBITRAGE_BOUND: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsviParams {
    /// `(tau, theta)` pairs, strictly increasing in tau and non-decreasing in theta.
    pub theta_curve: Vec<(f64, f64)>,
    pub rho: f64,
    pub eta: f64,
    pub gamma_exp: f64,
}

impl SsviParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta_curve.is_empty() {
            return Err(Error::Domain("empty theta curve".into()));
        }
        if !(self.rho.abs() < 1.0) || !(self.eta > 0.0) || !(self.gamma_exp > 0.0 && self.gamma_exp < 1.0) {
            return Err(Error::Domain(format!(
                "invalid SSVI shape rho={} eta={} gamma={}",
                self.rho, self.eta, self.gamma_exp
            )));
        }
        for w in self.theta_curve.windows(2) {
            if !(w[1].0 > w[0].0) || w[1].1 < w[0].1 {
                return Err(Error::Domain(format!("theta curve not monotone at tau={}", w[1].0)));
            }
        }
        if self.theta_curve.iter().any(|&(t, th)| !(t > 0.0) || !(th > 0.0)) {
            return Err(Error::Domain("theta curve needs positive maturities and variances".into()));
        }
        Ok(())
    }

    pub fn phi(&self, theta: f64) -> f64 {
        self.eta * theta.powf(-self.gamma_exp)
    }

    /// Largest `theta * phi (1+|rho|)` and `theta * phi^2 (1+|rho|)` over the curve.
    ///
    /// Both products are monotone in theta, so the curve endpoints bound every
    /// interpolated value.
    pub fn constraint_values(&self) -> (f64, f64) {
        let factor = 1.0 + self.rho.abs();
        let mut first: f64 = 0.0;
        let mut second: f64 = 0.0;
        for &(_, theta) in &self.theta_curve {
            let phi = self.phi(theta);
            first = first.max(theta * phi * factor);
            second = second.max(theta * phi * phi * factor);
        }
        (first, second)
    }

    pub fn is_arbitrage_free(&self) -> bool {
        let (a, b) = self.constraint_values();
        self.validate().is_ok() && a <= ARBITRAGE_BOUND && b <= ARBITRAGE_BOUND
    }

    /// ATM total variance at `tau`. Outside the curve the ATM vol is held flat,
    /// i.e. theta scales linearly with tau through the nearest node.
    pub fn theta(&self, tau: f64) -> Result<f64> {
        let curve = &self.theta_curve;
        let (first, last) = match (curve.first(), curve.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(Error::Domain("empty theta curve".into())),
        };
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("maturity must be positive, got {tau}")));
        }
        let theta = if tau <= first.0 {
            first.1 * tau / first.0
        } else if tau >= last.0 {
            last.1 * tau / last.0
        } else {
            let i = curve.partition_point(|&(t, _)| t <= tau);
            let (t0, th0) = curve[i - 1];
            let (t1, th1) = curve[i];
            th0 + (th1 - th0) * (tau - t0) / (t1 - t0)
        };
        if theta < 0.0 || !theta.is_finite() {
            return Err(Error::Domain(format!("interpolated theta {theta} at tau={tau}")));
        }
        Ok(theta)
    }

    /// Implied volatility `sqrt(w / tau)`.
    pub fn vol(&self, k: f64, tau: f64) -> Result<f64> {
        Ok((ssvi_total_variance(self, k, tau)? / tau).sqrt())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Total implied variance `w(k, tau)`.
pub fn ssvi_total_variance(p: &SsviParams, k: f64, tau: f64) -> Result<f64> {
    let theta = p.theta(tau)?;
    Ok(slice_total_variance(theta, p.phi(theta), p.rho, k))
}

fn slice_total_variance(theta: f64, phi: f64, rho: f64, k: f64) -> f64 {
    if theta == 0.0 {
        return 0.0;
    }
    let a = phi * k + rho;
    0.5 * theta * (1.0 + rho * phi * k + (a * a + 1.0 - rho * rho).sqrt())
}

/// `(w, dw/dk, d2w/dk2)` at fixed maturity.
pub fn ssvi_slice_derivatives(p: &SsviParams, k: f64, tau: f64) -> Result<(f64, f64, f64)> {
    let theta = p.theta(tau)?;
    let phi = p.phi(theta);
    let rho = p.rho;
    let a = phi * k + rho;
    let s = (a * a + 1.0 - rho * rho).sqrt();
    let w = slice_total_variance(theta, phi, rho, k);
    let w1 = 0.5 * theta * phi * (rho + a / s);
    let w2 = 0.5 * theta * phi * phi * (1.0 - rho * rho) / (s * s * s);
    Ok((w, w1, w2))
}

/// Pool-adjacent-violators projection onto non-decreasing sequences (unit weights).
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m1, n1) = blocks[blocks.len() - 1];
            let (m0, n0) = blocks[blocks.len() - 2];
            if m0 <= m1 {
                break;
            }
            blocks.pop();
            let n = n0 + n1;
            *blocks.last_mut().expect("two blocks") = ((m0 * n0 as f64 + m1 * n1 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat(m).take(n)).collect()
}

/// Largest eta satisfying both inequalities for the given rho, gamma and curve.
pub fn eta_ceiling(thetas: &[f64], rho: f64, gamma: f64) -> f64 {
    let factor = 1.0 + rho.abs();
    thetas
        .iter()
        .map(|&th| {
            let first = ARBITRAGE_BOUND / (factor * th.powf(1.0 - gamma));
            let second = (ARBITRAGE_BOUND / (factor * th.powf(1.0 - 2.0 * gamma))).sqrt();
            first.min(second)
        })
        .fold(f64::INFINITY, f64::min)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained vector `[atanh rho, logit gamma, logit(eta / eta_max), ln theta_1, ln dtheta_2, ...]`.
struct Mapping {
    taus: Vec<f64>,
}

/// Theta increments are floored so the mapped curve stays strictly positive.
const THETA_FLOOR: f64 = 1e-10;

impl Mapping {
    fn decode(&self, x: &[f64]) -> SsviParams {
        let rho = x[0].tanh().clamp(-1.0 + 1e-9, 1.0 - 1e-9);
        let gamma = sigmoid(x[1]).clamp(1e-6, 1.0 - 1e-6);
        let mut theta = 0.0;
        let thetas: Vec<f64> = x[3..]
            .iter()
            .map(|u| {
                theta += u.exp() + THETA_FLOOR;
                theta
            })
            .collect();
        // Slightly inside the ceiling so rounding never pushes a product above the bound.
        let eta = eta_ceiling(&thetas, rho, gamma) * sigmoid(x[2]) * (1.0 - 1e-12);
        SsviParams { theta_curve: self.taus.iter().copied().zip(thetas).collect(), rho, eta, gamma_exp: gamma }
    }

    fn encode(&self, p: &SsviParams) -> Vec<f64> {
        let thetas: Vec<f64> = p.theta_curve.iter().map(|&(_, th)| th).collect();
        let ceiling = eta_ceiling(&thetas, p.rho, p.gamma_exp);
        let frac = (p.eta / ceiling).clamp(1e-6, 1.0 - 1e-6);
        let mut x = vec![p.rho.clamp(-0.999, 0.999).atanh(), logit(p.gamma_exp), logit(frac)];
        let mut prev = 0.0;
        for th in thetas {
            x.push((th - prev - THETA_FLOOR).max(1e-12).ln());
            prev = th;
        }
        x
    }
}

fn residuals(p: &SsviParams, quotes: &[Quote]) -> Vec<f64> {
    quotes
        .iter()
        .map(|q| match p.vol(q.k(), q.tau()) {
            Ok(v) => v - q.vol,
            Err(_) => f64::NAN,
        })
        .collect()
}

/// Per-maturity ATM total variance read off the quotes: linear interpolation
/// of the two quotes bracketing k = 0, else the nearest quote.
fn empirical_thetas(quotes: &[Quote], taus: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = taus
        .iter()
        .map(|&tau| {
            let mut slice: Vec<&Quote> = quotes.iter().filter(|q| q.tau() == tau).collect();
            slice.sort_by(|a, b| a.k().total_cmp(&b.k()));
            let below = slice.iter().rev().find(|q| q.k() <= 0.0);
            let above = slice.iter().find(|q| q.k() > 0.0);
            let vol = match (below, above) {
                (Some(a), Some(b)) => a.vol + (b.vol - a.vol) * (0.0 - a.k()) / (b.k() - a.k()),
                (Some(a), None) => a.vol,
                (None, Some(b)) => b.vol,
                (None, None) => 0.2,
            };
            vol * vol * tau
        })
        .collect();
    isotonic_non_decreasing(&raw)
}

/// Least-squares fit of SSVI to implied vols, jointly over the shape
/// parameters and the ATM variance at every quoted maturity.
pub fn calibrate_ssvi(quotes: &[Quote], init: Option<&SsviParams>) -> Result<SsviParams> {
    let taus = distinct_taus(quotes);
    if quotes.len() < 5 || taus.len() < 2 {
        return Err(Error::InsufficientQuotes { needed: 5, available: quotes.len() });
    }
    let mapping = Mapping { taus: taus.clone() };
    let thetas = empirical_thetas(quotes, &taus);
    let curve: Vec<(f64, f64)> = taus.iter().copied().zip(thetas.iter().copied()).collect();

    let mut starts = Vec::new();
    if let Some(p) = init {
        // Re-anchor a supplied surface on this quote set's maturities.
        let th: Vec<f64> = taus.iter().map(|&t| p.theta(t).unwrap_or(0.04 * t)).collect();
        let th = isotonic_non_decreasing(&th);
        let anchored = SsviParams { theta_curve: taus.iter().copied().zip(th).collect(), ..p.clone() };
        starts.push(mapping.encode(&anchored));
    }
    for &rho in &[-0.6, 0.0, 0.4] {
        for &gamma in &[0.3, 0.6] {
            let p = SsviParams { theta_curve: curve.clone(), rho, eta: 1.0, gamma_exp: gamma };
            let mut x = mapping.encode(&p);
            x[2] = 0.0;
            starts.push(x);
        }
    }

    let lm = LevenbergMarquardt::default();
    let mut best: Option<(f64, SsviParams)> = None;
    for start in starts {
        let m = lm.minimize(|x| residuals(&mapping.decode(x), quotes), &start);
        if !m.value.is_finite() {
            continue;
        }
        let p = mapping.decode(&m.x);
        if best.as_ref().map_or(true, |(v, _)| m.value < *v) {
            best = Some((m.value, p));
        }
    }
    let (_, params) = best.ok_or_else(|| Error::CalibrationFailed("every SSVI start diverged".into()))?;
    if !params.is_arbitrage_free() {
        return Err(Error::CalibrationFailed(format!("calibrated SSVI violates its constraints: {params:?}")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> SsviParams {
        SsviParams {
            theta_curve: vec![(0.25, 0.01), (0.5, 0.02), (1.0, 0.04), (2.0, 0.085)],
            rho: -0.4,
            eta: 0.8,
            gamma_exp: 0.45,
        }
    }

    fn grid_quotes(p: &SsviParams) -> Vec<Quote> {
        let mut out = Vec::new();
        for &(tau, _) in &p.theta_curve {
            for i in 0..13 {
                let k = -0.4 + i as f64 * 1.0 / 15.0;
                out.push(Quote::new(k, tau, p.vol(k, tau).unwrap()).unwrap());
            }
        }
        out
    }

    #[test]
    fn atm_anchor() {
        let p = example();
        for &(tau, theta) in &p.theta_curve {
            assert_eq!(ssvi_total_variance(&p, 0.0, tau).unwrap(), theta);
        }
    }

    #[test]
    fn symmetric_without_correlation() {
        let p = SsviParams { rho: 0.0, ..example() };
        for k in [0.05, 0.2, 0.7] {
            assert_eq!(ssvi_total_variance(&p, k, 0.7).unwrap(), ssvi_total_variance(&p, -k, 0.7).unwrap());
        }
    }

    #[test]
    fn closed_form_value() {
        // theta = 0.04 at tau = 1; phi = 0.8 * 0.04^-0.45, k = 0.1, rho = -0.4.
        let p = example();
        let phi = 0.8 * 0.04f64.powf(-0.45);
        let inner = ((phi * 0.1 - 0.4).powi(2) + 1.0 - 0.16).sqrt();
        let expected = 0.02 * (1.0 - 0.4 * phi * 0.1 + inner);
        assert!((ssvi_total_variance(&p, 0.1, 1.0).unwrap() - expected).abs() < 1e-16);
        // 40-digit evaluation of the same expression.
        assert!((expected - 0.035_644_555_118_204_66).abs() < 1e-15, "{expected}");
    }

    #[test]
    fn theta_interpolation_and_extrapolation() {
        let p = example();
        assert!((p.theta(0.75).unwrap() - 0.03).abs() < 1e-15);
        assert!((p.theta(0.125).unwrap() - 0.005).abs() < 1e-15);
        assert!((p.theta(4.0).unwrap() - 0.17).abs() < 1e-15);
        assert!(p.theta(0.0).is_err());
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let p = example();
        let h = 1e-4;
        for i in 0..21 {
            let k = -1.0 + 0.1 * i as f64;
            let (w, w1, w2) = ssvi_slice_derivatives(&p, k, 0.8).unwrap();
            let f = |k: f64| ssvi_total_variance(&p, k, 0.8).unwrap();
            assert_eq!(w, f(k));
            assert!((w1 - (f(k + h) - f(k - h)) / (2.0 * h)).abs() < 1e-8);
            assert!((w2 - (f(k + h) - 2.0 * w + f(k - h)) / (h * h)).abs() < 1e-5);
        }
    }

    #[test]
    fn isotonic_projection() {
        assert_eq!(isotonic_non_decreasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic_non_decreasing(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(isotonic_non_decreasing(&[]), Vec::<f64>::new());
    }

    #[test]
    fn single_maturity_rejected() {
        let quotes: Vec<Quote> = (0..8).map(|i| Quote::new(i as f64 * 0.05, 0.5, 0.2).unwrap()).collect();
        assert!(matches!(calibrate_ssvi(&quotes, None), Err(Error::InsufficientQuotes { .. })));
    }

    #[test]
    fn self_consistent_fit() {
        let truth = example();
        assert!(truth.is_arbitrage_free());
        let quotes = grid_quotes(&truth);
        let fit = calibrate_ssvi(&quotes, None).unwrap();
        assert!(fit.is_arbitrage_free());
        let r = residuals(&fit, &quotes);
        let rmse_bps = 1e4 * (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
        assert!(rmse_bps <= 5.0, "rmse {rmse_bps} bps");
    }

    #[test]
    fn fit_to_non_ssvi_smile_stays_admissible() {
        // A steep SABR-like smile the parameterisation cannot match exactly.
        let mut quotes = Vec::new();
        for tau in [0.1, 0.4, 1.5] {
            for i in 0..11 {
                let k = -0.5 + 0.1 * i as f64;
                quotes.push(Quote::new(k, tau, 0.25 - 0.3 * k + 0.9 * k * k / tau.sqrt()).unwrap());
            }
        }
        let fit = calibrate_ssvi(&quotes, None).unwrap();
        let (a, b) = fit.constraint_values();
        assert!(a <= ARBITRAGE_BOUND && b <= ARBITRAGE_BOUND);
        fit.validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let p = example();
        assert_eq!(SsviParams::from_json(&p.to_json().unwrap()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn variance_non_decreasing_in_tau(k in -1.0..1.0f64, t1 in 0.05..3.0f64, dt in 0.0..1.0f64) {
            let p = example();
            let a = ssvi_total_variance(&p, k, t1).unwrap();
            let b = ssvi_total_variance(&p, k, t1 + dt).unwrap();
            prop_assert!(b >= a - 1e-15);
        }

        #[test]
        fn mapped_params_always_admissible(x in proptest::collection::vec(-6.0..6.0f64, 7)) {
            let mapping = Mapping { taus: vec![0.1, 0.3, 0.9, 2.0] };
            let p = mapping.decode(&x);
            prop_assert!(p.is_arbitrage_free(), "{:?} {:?}", p, p.constraint_values());
        }
    }
}
