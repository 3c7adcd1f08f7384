//! Hagan's lognormal SABR expansion, per-slice calibration and the dense
//! synthetic surfaces used as a pre-training prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::types::{distinct_taus, ForwardCurve, Quote};

const RHO_CLAMP: f64 = 1.0 - 1e-6;
/// Below this |z| the ratio z / x(z) uses its Taylor expansion.
const Z_SERIES_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub nu: f64,
}

impl SabrParams {
    pub fn new(alpha: f64, beta: f64, rho: f64, nu: f64) -> Result<Self> {
        let p = Self { alpha, beta, rho, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..=1.0).contains(&self.beta)
            && self.rho > -1.0
            && self.rho < 1.0
            && self.nu >= 0.0
            && [self.alpha, self.beta, self.rho, self.nu].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("SABR parameters out of bounds: {self:?}")))
        }
    }
}

/// z / x(z) with its analytic limit near z = 0.
fn z_over_x(z: f64, rho: f64) -> f64 {
    if z.abs() < Z_SERIES_THRESHOLD {
        1.0 - 0.5 * rho * z + (2.0 - 3.0 * rho * rho) * z * z / 12.0
    } else {
        let x = (((1.0 - 2.0 * rho * z + z * z).sqrt() + z - rho) / (1.0 - rho)).ln();
        z / x
    }
}

fn hagan_parts(p: &SabrParams, forward: f64, strike: f64, tau: f64) -> (f64, f64, f64) {
    let omb = 1.0 - p.beta;
    let log_fk = (forward / strike).ln();
    let fk_pow = (forward * strike).powf(0.5 * omb);
    let denom = fk_pow * (1.0 + omb * omb / 24.0 * log_fk * log_fk + omb.powi(4) / 1920.0 * log_fk.powi(4));
    let correction = 1.0
        + (omb * omb / 24.0 * p.alpha * p.alpha / (fk_pow * fk_pow)
            + 0.25 * p.rho * p.beta * p.nu * p.alpha / fk_pow
            + (2.0 - 3.0 * p.rho * p.rho) / 24.0 * p.nu * p.nu)
            * tau;
    let z = p.nu / p.alpha * fk_pow * log_fk;
    (p.alpha / denom * correction, z, correction)
}

/// Hagan et al. lognormal implied-volatility approximation.
pub fn hagan_vol(params: &SabrParams, forward: f64, strike: f64, tau: f64) -> Result<f64> {
    params.validate()?;
    if !(forward > 0.0 && strike > 0.0 && tau > 0.0) {
        return Err(Error::Domain(format!("forward {forward}, strike {strike}, tau {tau} must be positive")));
    }
    Ok(hagan_vol_unchecked(params, forward, strike, tau))
}

fn hagan_vol_unchecked(params: &SabrParams, forward: f64, strike: f64, tau: f64) -> f64 {
    let (scale, z, _) = hagan_parts(params, forward, strike, tau);
    if strike == forward {
        return scale;
    }
    scale * z_over_x(z, params.rho)
}

/// One calibrated maturity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrSlice {
    pub tau: f64,
    #[serde(flatten)]
    pub params: SabrParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SabrTermStructure {
    pub slices: Vec<SabrSlice>,
    #[serde(default)]
    pub forward_curve: ForwardCurve,
}

impl SabrTermStructure {
    pub fn new(mut slices: Vec<SabrSlice>, forward_curve: ForwardCurve) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Domain("term structure needs at least one slice".into()));
        }
        slices.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        if slices.windows(2).any(|w| w[0].tau >= w[1].tau) {
            return Err(Error::Domain("slice maturities must be strictly increasing".into()));
        }
        for s in &slices {
            s.params.validate()?;
        }
        Ok(Self { slices, forward_curve })
    }

    /// Forward at `tau`, or 1.0 when the curve is empty (quotes are in log-moneyness).
    pub fn forward(&self, tau: f64) -> f64 {
        self.forward_curve.forward(tau).unwrap_or(1.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ts: Self = serde_json::from_str(s)?;
        Self::new(ts.slices, ts.forward_curve)
    }

    /// Implied vol at log-moneyness `k` and maturity `tau`.
    pub fn vol(&self, k: f64, tau: f64) -> Result<f64> {
        let p = interpolate_params(self, tau);
        let f = self.forward(tau);
        hagan_vol(&p, f, f * k.exp(), tau)
    }
}

/// Component-wise linear interpolation in tau, flat outside the slice range.
pub fn interpolate_params(ts: &SabrTermStructure, tau: f64) -> SabrParams {
    let slices = &ts.slices;
    let first = slices[0];
    let last = slices[slices.len() - 1];
    let mut p = if tau <= first.tau {
        first.params
    } else if tau >= last.tau {
        last.params
    } else {
        let i = slices.partition_point(|s| s.tau <= tau);
        let (a, b) = (slices[i - 1], slices[i]);
        if a.tau == tau {
            a.params
        } else {
            let w = (tau - a.tau) / (b.tau - a.tau);
            let lerp = |x: f64, y: f64| x + w * (y - x);
            SabrParams {
                alpha: lerp(a.params.alpha, b.params.alpha),
                beta: lerp(a.params.beta, b.params.beta),
                rho: lerp(a.params.rho, b.params.rho),
                nu: lerp(a.params.nu, b.params.nu),
            }
        }
    };
    p.rho = p.rho.clamp(-RHO_CLAMP, RHO_CLAMP);
    p
}

fn to_unconstrained(p: &SabrParams) -> [f64; 3] {
    [p.alpha.ln(), p.rho.clamp(-0.999, 0.999).atanh(), p.nu.max(1e-8).ln()]
}

fn from_unconstrained(x: &[f64], beta: f64) -> SabrParams {
    SabrParams {
        alpha: x[0].exp(),
        beta,
        rho: x[1].tanh().clamp(-RHO_CLAMP, RHO_CLAMP),
        nu: x[2].exp(),
    }
}

/// Sum of squared vol residuals of `params` on one slice.
pub fn slice_objective(params: &SabrParams, quotes: &[Quote], forward: f64, tau: f64) -> f64 {
    quotes
        .iter()
        .map(|q| {
            let v = hagan_vol_unchecked(params, forward, forward * q.k().exp(), tau);
            (v - q.vol).powi(2)
        })
        .sum()
}

/// Least-squares fit of (alpha, rho, nu) to one maturity slice with beta held fixed.
pub fn calibrate_slice(
    quotes_at_tau: &[Quote],
    forward: f64,
    tau: f64,
    beta: f64,
    init: Option<SabrParams>,
) -> Result<SabrParams> {
    if quotes_at_tau.len() < 3 {
        return Err(Error::InsufficientQuotes { needed: 3, available: quotes_at_tau.len() });
    }
    if !(forward > 0.0 && tau > 0.0 && (0.0..=1.0).contains(&beta)) {
        return Err(Error::Domain(format!("bad slice inputs forward={forward} tau={tau} beta={beta}")));
    }
    let atm = quotes_at_tau
        .iter()
        .min_by(|a, b| a.k().abs().total_cmp(&b.k().abs()))
        .map(|q| q.vol)
        .unwrap_or(0.2);
    let alpha0 = atm * forward.powf(1.0 - beta);

    let mut starts: Vec<SabrParams> = Vec::new();
    if let Some(p) = init {
        if p.validate().is_ok() {
            starts.push(SabrParams { beta, ..p });
        }
    }
    for rho in [-0.8, 0.0, 0.8] {
        for nu in [0.1, 1.0] {
            starts.push(SabrParams { alpha: alpha0, beta, rho, nu });
        }
    }

    let objective = |x: &[f64]| slice_objective(&from_unconstrained(x, beta), quotes_at_tau, forward, tau);
    let nm = NelderMead { max_evals: 3000, f_tol: 1e-22, x_tol: 1e-11, initial_step: 0.3 };
    let polish = NelderMead { initial_step: 0.02, ..nm };

    let mut best: Option<(f64, SabrParams)> = None;
    for start in &starts {
        let x0 = to_unconstrained(start);
        let f0 = objective(&x0);
        let first = nm.minimize(objective, &x0);
        let second = polish.minimize(objective, &first.x);
        let (x, value) = if second.value <= first.value { (second.x, second.value) } else { (first.x, first.value) };
        if !value.is_finite() || value > f0 {
            continue;
        }
        let p = from_unconstrained(&x, beta);
        if best.as_ref().map_or(true, |(v, _)| value < *v) {
            best = Some((value, p));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::CalibrationFailed(format!("all SABR starts diverged at tau={tau}")))
}

/// Group quotes by exact maturity.
pub fn group_by_tau(quotes: &[Quote]) -> Vec<(f64, Vec<Quote>)> {
    distinct_taus(quotes)
        .into_iter()
        .map(|t| (t, quotes.iter().copied().filter(|q| q.tau() == t).collect()))
        .collect()
}

/// Calibrate every maturity slice with at least three quotes; thinner slices are skipped.
pub fn calibrate_term_structure(quotes: &[Quote], forward_curve: &ForwardCurve, beta: f64) -> Result<SabrTermStructure> {
    let mut slices = Vec::new();
    let mut prev: Option<SabrParams> = None;
    for (tau, group) in group_by_tau(quotes) {
        if group.len() < 3 {
            continue;
        }
        let forward = forward_curve.forward(tau).unwrap_or(1.0);
        match calibrate_slice(&group, forward, tau, beta, prev) {
            Ok(p) => {
                prev = Some(p);
                slices.push(SabrSlice { tau, params: p });
            }
            Err(e) => log::debug!("SABR slice tau={tau} skipped: {e}"),
        }
    }
    if slices.is_empty() {
        return Err(Error::CalibrationFailed("no maturity slice with at least 3 quotes".into()));
    }
    SabrTermStructure::new(slices, forward_curve.clone())
}

/// Evaluate the interpolated term structure on a regular (k, tau) grid, tau-major.
pub fn generate_surface(ts: &SabrTermStructure, k_grid: &[f64], tau_grid: &[f64]) -> Result<Vec<Quote>> {
    if k_grid.is_empty() || tau_grid.is_empty() {
        return Err(Error::Domain("surface grid must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(k_grid.len() * tau_grid.len());
    for &tau in tau_grid {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("grid maturity must be positive, got {tau}")));
        }
        let p = interpolate_params(ts, tau);
        let f = ts.forward(tau);
        for &k in k_grid {
            let vol = hagan_vol(&p, f, f * k.exp(), tau)?;
            out.push(Quote::new(k, tau, vol)?);
        }
    }
    Ok(out)
}

/// Grid settings for synthetic prior surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub k_min: f64,
    pub k_max: f64,
    pub k_step: f64,
    /// Add midpoints between consecutive observed maturities.
    pub tau_midpoints: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { k_min: -0.5, k_max: 0.5, k_step: 0.025, tau_midpoints: true }
    }
}

impl GridConfig {
    pub fn k_grid(&self) -> Vec<f64> {
        inclusive_range(self.k_min, self.k_max, self.k_step)
    }

    /// Observed maturities plus (optionally) their midpoints.
    pub fn tau_grid(&self, maturities: &[f64]) -> Vec<f64> {
        let mut taus: Vec<f64> = maturities.to_vec();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        if self.tau_midpoints {
            let mids: Vec<f64> = taus.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            taus.extend(mids);
            taus.sort_by(f64::total_cmp);
        }
        taus
    }
}

/// `lo, lo+step, ..., hi` with the count rounded to the nearest integer.
pub fn inclusive_range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || hi < lo {
        return vec![lo];
    }
    let n = ((hi - lo) / step).round() as usize + 1;
    (0..n).map(|i| lo + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn p(alpha: f64, beta: f64, rho: f64, nu: f64) -> SabrParams {
        SabrParams::new(alpha, beta, rho, nu).unwrap()
    }

    #[test]
    fn degenerate_sabr_is_lognormal() {
        let params = p(0.2, 1.0, 0.0, 0.0);
        for k in [60.0, 80.0, 100.0, 130.0] {
            assert!((hagan_vol(&params, 100.0, k, 2.0).unwrap() - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn atm_limit() {
        let params = p(0.25, 1.0, -0.3, 0.7);
        let tau = 0.8;
        let expected = 0.25 * (1.0 + (-0.3 * 0.7 * 0.25 / 4.0 + (2.0 - 3.0 * 0.09) * 0.49 / 24.0) * tau);
        assert!((hagan_vol(&params, 100.0, 100.0, tau).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_high_precision_reference() {
        // Independent 30-digit evaluation of the published expansion.
        let params = p(0.2, 1.0, -0.4, 0.6);
        let cases = [(80.0, 0.235_774_019_813_594_5), (100.0, 0.20108), (120.0, 0.188_547_336_398_504_2)];
        for (k, v) in cases {
            assert!((hagan_vol(&params, 100.0, k, 0.5).unwrap() - v).abs() < 1e-13, "K={k}");
        }
        let params = p(0.3, 0.5, -0.3, 0.4);
        let cases = [(80.0, 0.057_063_896_167_779_12), (100.0, 0.030_499_171_875), (120.0, 0.038_997_301_778_723_21)];
        for (k, v) in cases {
            assert!((hagan_vol(&params, 100.0, k, 1.5).unwrap() - v).abs() < 1e-13, "K={k}");
        }
    }

    #[test]
    fn continuous_at_the_money() {
        let params = p(0.2, 0.7, -0.5, 0.9);
        let atm = hagan_vol(&params, 100.0, 100.0, 1.0).unwrap();
        for bump in [1.0 + 1e-7, 1.0 - 1e-7] {
            let strike = 100.0 * bump;
            let (scale, z, _) = hagan_parts(&params, 100.0, strike, 1.0);
            let x = (((1.0 - 2.0 * params.rho * z + z * z).sqrt() + z - params.rho) / (1.0 - params.rho)).ln();
            let generic = scale * z / x;
            assert!((generic - atm).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(SabrParams::new(-0.1, 1.0, 0.0, 0.1).is_err());
        assert!(SabrParams::new(0.1, 1.0, 1.0, 0.1).is_err());
        let bad = SabrParams { alpha: 0.2, beta: 1.5, rho: 0.0, nu: 0.1 };
        assert!(hagan_vol(&bad, 100.0, 100.0, 1.0).is_err());
    }

    fn slice(params: &SabrParams, tau: f64, n: usize) -> Vec<Quote> {
        (0..n)
            .map(|i| {
                let k = -0.4 + 0.8 * i as f64 / (n - 1) as f64;
                Quote::new(k, tau, hagan_vol(params, 1.0, k.exp(), tau).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn recovers_generating_params() {
        let truth = p(0.25, 1.0, -0.3, 0.5);
        let quotes = slice(&truth, 0.5, 9);
        let fit = calibrate_slice(&quotes, 1.0, 0.5, 1.0, None).unwrap();
        assert!((fit.alpha - 0.25).abs() < 1e-4, "{fit:?}");
        assert!((fit.rho + 0.3).abs() < 1e-4, "{fit:?}");
        assert!((fit.nu - 0.5).abs() < 1e-4, "{fit:?}");
    }

    #[test]
    fn recovers_params_under_noise() {
        let truth = p(0.22, 1.0, -0.45, 0.8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 10e-4).unwrap();
        let mut quotes = slice(&truth, 1.0, 2001);
        for q in &mut quotes {
            q.vol += noise.sample(&mut rng);
        }
        let fit = calibrate_slice(&quotes, 1.0, 1.0, 1.0, None).unwrap();
        assert!((fit.alpha - truth.alpha).abs() < 1e-3, "{fit:?}");
        assert!((fit.rho - truth.rho).abs() < 1e-3, "{fit:?}");
        assert!((fit.nu - truth.nu).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn too_few_quotes() {
        let quotes = slice(&p(0.2, 1.0, 0.0, 0.3), 1.0, 2);
        assert!(matches!(calibrate_slice(&quotes, 1.0, 1.0, 1.0, None), Err(Error::InsufficientQuotes { .. })));
    }

    #[test]
    fn flat_smile() {
        let quotes: Vec<Quote> = (0..7).map(|i| Quote::new(-0.3 + 0.1 * i as f64, 0.5, 0.2).unwrap()).collect();
        let fit = calibrate_slice(&quotes, 1.0, 0.5, 1.0, None).unwrap();
        assert!((fit.alpha - 0.2).abs() < 1e-4, "{fit:?}");
        assert!(fit.nu < 1e-2, "{fit:?}");
    }

    #[test]
    fn best_of_starts_not_worse_than_any_start() {
        let truth = p(0.3, 1.0, 0.4, 1.2);
        let quotes = slice(&truth, 0.25, 5);
        let fit = calibrate_slice(&quotes, 1.0, 0.25, 1.0, None).unwrap();
        let value = slice_objective(&fit, &quotes, 1.0, 0.25);
        for rho in [-0.8, 0.0, 0.8] {
            for nu in [0.1, 1.0] {
                let start = SabrParams { alpha: 0.3, beta: 1.0, rho, nu };
                assert!(value <= slice_objective(&start, &quotes, 1.0, 0.25));
            }
        }
    }

    fn two_slice_ts() -> SabrTermStructure {
        SabrTermStructure::new(
            vec![
                SabrSlice { tau: 0.5, params: p(0.2, 1.0, -0.2, 0.4) },
                SabrSlice { tau: 1.5, params: p(0.3, 1.0, -0.6, 0.8) },
            ],
            ForwardCurve::default(),
        )
        .unwrap()
    }

    #[test]
    fn interpolation_rules() {
        let ts = two_slice_ts();
        assert_eq!(interpolate_params(&ts, 0.5), ts.slices[0].params);
        let mid = interpolate_params(&ts, 1.0);
        assert!((mid.alpha - 0.25).abs() < 1e-15);
        assert!((mid.rho + 0.4).abs() < 1e-15);
        assert_eq!(interpolate_params(&ts, 5.0), ts.slices[1].params);
        assert_eq!(interpolate_params(&ts, 0.1), ts.slices[0].params);
    }

    #[test]
    fn surface_shapes() {
        let ts = two_slice_ts();
        let single = generate_surface(&ts, &[0.1], &[0.5]).unwrap();
        assert_eq!(single[0].vol, hagan_vol(&ts.slices[0].params, 1.0, 0.1f64.exp(), 0.5).unwrap());
        let k = inclusive_range(-0.5, 0.5, 0.025);
        let taus: Vec<f64> = (1..=12).map(|i| i as f64 * 0.2).collect();
        let surface = generate_surface(&ts, &k, &taus).unwrap();
        assert_eq!(k.len(), 41);
        assert_eq!(surface.len(), 492);
        assert!(surface.iter().all(|q| q.vol.is_finite() && q.vol > 0.0));
        assert_eq!(surface, generate_surface(&ts, &k, &taus).unwrap());
    }

    #[test]
    fn surface_reproduces_slice_fit_residuals() {
        let truth = p(0.25, 1.0, -0.3, 0.5);
        let quotes: Vec<Quote> = slice(&truth, 0.5, 9)
            .into_iter()
            .enumerate()
            .map(|(i, q)| Quote { vol: q.vol + if i % 2 == 0 { 1e-3 } else { -1e-3 }, ..q })
            .collect();
        let fc = ForwardCurve::default();
        let ts = calibrate_term_structure(&quotes, &fc, 1.0).unwrap();
        let ks: Vec<f64> = quotes.iter().map(|q| q.k()).collect();
        let surface = generate_surface(&ts, &ks, &[0.5]).unwrap();
        let direct = ts.slices[0].params;
        for (s, q) in surface.iter().zip(&quotes) {
            let v = hagan_vol(&direct, 1.0, q.k().exp(), 0.5).unwrap();
            assert!(((s.vol - q.vol) - (v - q.vol)).abs() < 1e-15);
        }
    }

    #[test]
    fn term_structure_json_round_trip() {
        let ts = two_slice_ts();
        let json = ts.to_json().unwrap();
        assert!(json.contains("\"alpha\""));
        assert_eq!(SabrTermStructure::from_json(&json).unwrap(), ts);
    }

    #[test]
    fn thin_slices_skipped() {
        let truth = p(0.2, 1.0, -0.3, 0.5);
        let mut quotes = slice(&truth, 0.5, 7);
        quotes.extend(slice(&truth, 1.0, 2));
        let ts = calibrate_term_structure(&quotes, &ForwardCurve::default(), 1.0).unwrap();
        assert_eq!(ts.slices.len(), 1);
    }
}
