//! Butterfly-arbitrage diagnostics on total-variance slices.
//!
//! With `w(k) = vol(k)^2 tau`, a slice admits a non-negative risk-neutral
//! density iff
//! `g(k) = (1 - k w'/(2w))^2 - (w'^2/4)(1/w + 1/4) + w''/2 >= 0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssvi::{ssvi_slice_derivatives, SsviParams};
use crate::types::Coordinate;

pub const DEFAULT_FD_STEP: f64 = 1e-3;
pub const VIOLATION_TOL: f64 = 1e-8;
/// Below this |g| the finite-difference estimate is Richardson-refined.
const REFINE_BELOW: f64 = 1e-4;

/// Anything that maps `(k, tau)` to an implied vol.
pub trait VolSurface {
    fn vol(&self, k: f64, tau: f64) -> Result<f64>;

    /// `(w, dw/dk, d2w/dk2)` in closed form, when the model has one.
    fn total_variance_derivatives(&self, _k: f64, _tau: f64) -> Option<Result<(f64, f64, f64)>> {
        None
    }
}

impl<F: ?Sized> VolSurface for F
where
    F: Fn(f64, f64) -> Result<f64>,
{
    fn vol(&self, k: f64, tau: f64) -> Result<f64> {
        self(k, tau)
    }
}

impl VolSurface for SsviParams {
    fn vol(&self, k: f64, tau: f64) -> Result<f64> {
        SsviParams::vol(self, k, tau)
    }

    fn total_variance_derivatives(&self, k: f64, tau: f64) -> Option<Result<(f64, f64, f64)>> {
        Some(ssvi_slice_derivatives(self, k, tau))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Analytic when the surface provides it, finite differences otherwise.
    Auto,
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDiagnostic {
    pub tau: f64,
    pub k_grid: Vec<f64>,
    pub g_values: Vec<f64>,
    /// Runs of grid points with `g < -tol`, widened to the midpoints of their neighbours.
    pub violation_intervals: Vec<(f64, f64)>,
    pub min_g: f64,
}

impl SliceDiagnostic {
    pub fn is_clean(&self) -> bool {
        self.violation_intervals.is_empty()
    }

    pub fn violation_width(&self) -> f64 {
        self.violation_intervals.iter().map(|(a, b)| b - a).sum()
    }
}

/// The Durrleman function from total variance and its first two k-derivatives.
pub fn durrleman_from_derivatives(k: f64, w: f64, w1: f64, w2: f64) -> f64 {
    let a = 1.0 - k * w1 / (2.0 * w);
    a * a - 0.25 * w1 * w1 * (1.0 / w + 0.25) + 0.5 * w2
}

fn total_variance<S: VolSurface + ?Sized>(surface: &S, k: f64, tau: f64) -> Result<f64> {
    let v = surface.vol(k, tau)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Domain(format!("non-positive vol {v} at k={k}, tau={tau}")));
    }
    Ok(v * v * tau)
}

fn central_differences<S: VolSurface + ?Sized>(surface: &S, k: f64, tau: f64, w: f64, h: f64) -> Result<(f64, f64)> {
    let up = total_variance(surface, k + h, tau)?;
    let down = total_variance(surface, k - h, tau)?;
    Ok(((up - down) / (2.0 * h), (up - 2.0 * w + down) / (h * h)))
}

fn g_at<S: VolSurface + ?Sized>(surface: &S, k: f64, tau: f64, fd_step: f64, mode: DerivativeMode) -> Result<f64> {
    if mode != DerivativeMode::FiniteDifference {
        match surface.total_variance_derivatives(k, tau) {
            Some(d) => {
                let (w, w1, w2) = d?;
                if !(w > 0.0) {
                    return Err(Error::Domain(format!("non-positive total variance at k={k}, tau={tau}")));
                }
                return Ok(durrleman_from_derivatives(k, w, w1, w2));
            }
            None if mode == DerivativeMode::Analytic => {
                return Err(Error::Domain("surface has no analytic derivatives".into()));
            }
            None => {}
        }
    }
    let w = total_variance(surface, k, tau)?;
    let (w1, w2) = central_differences(surface, k, tau, w, fd_step)?;
    let g = durrleman_from_derivatives(k, w, w1, w2);
    if g.abs() >= REFINE_BELOW {
        return Ok(g);
    }
    let (h1, h2) = central_differences(surface, k, tau, w, 0.5 * fd_step)?;
    let w1 = (4.0 * h1 - w1) / 3.0;
    let w2 = (4.0 * h2 - w2) / 3.0;
    Ok(durrleman_from_derivatives(k, w, w1, w2))
}

/// Durrleman diagnostic for one slice, preferring analytic derivatives.
pub fn durrleman_g<S: VolSurface + ?Sized>(surface: &S, tau: f64, k_grid: &[f64], fd_step: f64) -> Result<SliceDiagnostic> {
    durrleman_g_with(surface, tau, k_grid, fd_step, DerivativeMode::Auto)
}

pub fn durrleman_g_with<S: VolSurface + ?Sized>(
    surface: &S,
    tau: f64,
    k_grid: &[f64],
    fd_step: f64,
    mode: DerivativeMode,
) -> Result<SliceDiagnostic> {
    if !(fd_step > 0.0) {
        return Err(Error::Domain(format!("fd_step must be positive, got {fd_step}")));
    }
    if k_grid.is_empty() {
        return Err(Error::Domain("empty k grid".into()));
    }
    let g_values = k_grid.iter().map(|&k| g_at(surface, k, tau, fd_step, mode)).collect::<Result<Vec<_>>>()?;
    let min_g = g_values.iter().copied().fold(f64::INFINITY, f64::min);
    let violation_intervals = violation_runs(k_grid, &g_values, VIOLATION_TOL);
    Ok(SliceDiagnostic { tau, k_grid: k_grid.to_vec(), g_values, violation_intervals, min_g })
}

/// Finite-difference diagnostic for a surface that is cheapest to query in
/// batches: every stencil point of the slice goes through one `predict` call.
/// Matches `durrleman_g_with(.., FiniteDifference)` on the same surface.
pub fn durrleman_g_batched<P>(predict: P, tau: f64, k_grid: &[f64], fd_step: f64) -> Result<SliceDiagnostic>
where
    P: Fn(&[Coordinate]) -> Result<Vec<f64>>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Domain(format!("fd_step must be positive, got {fd_step}")));
    }
    if k_grid.is_empty() {
        return Err(Error::Domain("empty k grid".into()));
    }
    let offsets = [0.0, fd_step, -fd_step, 0.5 * fd_step, -0.5 * fd_step];
    let coords = k_grid
        .iter()
        .flat_map(|&k| offsets.iter().map(move |&o| Coordinate::new(k + o, tau)))
        .collect::<Result<Vec<_>>>()?;
    let vols = predict(&coords)?;
    if vols.len() != coords.len() {
        return Err(Error::LengthMismatch(coords.len(), vols.len()));
    }
    let table: Vec<(f64, f64, f64)> = coords.iter().zip(&vols).map(|(c, &v)| (c.k, tau, v)).collect();
    let lookup = |k: f64, t: f64| -> Result<f64> {
        table
            .iter()
            .find(|e| e.0 == k && e.1 == t)
            .map(|e| e.2)
            .ok_or_else(|| Error::Domain(format!("no batched vol at k={k}")))
    };
    durrleman_g_with(&lookup, tau, k_grid, fd_step, DerivativeMode::FiniteDifference)
}

fn violation_runs(k: &[f64], g: &[f64], tol: f64) -> Vec<(f64, f64)> {
    let n = k.len();
    let left = |i: usize| if i == 0 { k[0] } else { 0.5 * (k[i - 1] + k[i]) };
    let right = |i: usize| if i + 1 == n { k[n - 1] } else { 0.5 * (k[i] + k[i + 1]) };
    let mut out = Vec::new();
    let mut start = None;
    for i in 0..n {
        let bad = g[i] < -tol;
        match (bad, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((left(s), right(i - 1)));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((left(s), right(n - 1)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_slices: usize,
    pub clean_slices: usize,
    pub fraction_clean: f64,
    /// Sum of violation-interval widths in k across slices.
    pub total_violation_width: f64,
    pub min_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageReport {
    pub slices: Vec<SliceDiagnostic>,
    pub summary: ReportSummary,
}

impl ArbitrageReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format: `tau,k,g,violation`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "k", "g", "violation"])?;
        for s in &self.slices {
            for (k, g) in s.k_grid.iter().zip(&s.g_values) {
                let bad = *g < -VIOLATION_TOL;
                w.write_record([s.tau.to_string(), k.to_string(), g.to_string(), (bad as u8).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Diagnose every maturity in `tau_list` on a shared k grid.
pub fn surface_report<S: VolSurface + ?Sized>(surface: &S, tau_list: &[f64], k_grid: &[f64]) -> Result<ArbitrageReport> {
    if tau_list.is_empty() {
        return Err(Error::Domain("empty maturity list".into()));
    }
    let slices = tau_list
        .iter()
        .map(|&tau| durrleman_g(surface, tau, k_grid, DEFAULT_FD_STEP))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(slices))
}

pub fn summarize(slices: Vec<SliceDiagnostic>) -> ArbitrageReport {
    let n = slices.len();
    let clean = slices.iter().filter(|s| s.is_clean()).count();
    let summary = ReportSummary {
        n_slices: n,
        clean_slices: clean,
        fraction_clean: if n == 0 { 1.0 } else { clean as f64 / n as f64 },
        total_violation_width: slices.iter().map(|s| s.violation_width()).sum(),
        min_g: slices.iter().map(|s| s.min_g).fold(f64::INFINITY, f64::min),
    };
    ArbitrageReport { slices, summary }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackvol::{black_price, BlackInputs};
    use crate::sabr::inclusive_range;
    use crate::types::OptionType;

    fn ssvi() -> SsviParams {
        SsviParams {
            theta_curve: vec![(0.1, 0.004), (0.5, 0.02), (1.0, 0.04), (2.0, 0.085)],
            rho: -0.6,
            eta: 1.2,
            gamma_exp: 0.4,
        }
    }

    fn k_grid() -> Vec<f64> {
        inclusive_range(-1.0, 1.0, 0.01)
    }

    #[test]
    fn batched_matches_pointwise() {
        let p = ssvi();
        let grid = inclusive_range(-0.6, 0.6, 0.05);
        let predict = |c: &[Coordinate]| c.iter().map(|c| p.vol(c.k, c.tau)).collect::<Result<Vec<_>>>();
        for tau in [0.1, 0.7] {
            let direct = durrleman_g_with(&|k, t| p.vol(k, t), tau, &grid, DEFAULT_FD_STEP, DerivativeMode::FiniteDifference).unwrap();
            let batched = durrleman_g_batched(predict, tau, &grid, DEFAULT_FD_STEP).unwrap();
            assert_eq!(direct, batched);
        }
    }

    /// Second strike-derivative of undiscounted Black call prices (F = 1).
    fn min_density<S: VolSurface + ?Sized>(surface: &S, tau: f64, ks: &[f64]) -> f64 {
        let call = |strike: f64| {
            let vol = surface.vol(strike.ln(), tau).unwrap();
            black_price(&BlackInputs::new(1.0, strike, tau, 1.0, OptionType::Call).unwrap(), vol).unwrap()
        };
        ks.iter()
            .map(|&k| {
                let strike = k.exp();
                let h = 1e-3 * strike;
                (call(strike + h) - 2.0 * call(strike) + call(strike - h)) / (h * h)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn flat_smile_gives_one() {
        let flat = |_k: f64, _t: f64| Ok(0.2);
        let d = durrleman_g(&flat, 1.0, &k_grid(), DEFAULT_FD_STEP).unwrap();
        assert!(d.g_values.iter().all(|g| (g - 1.0).abs() < 1e-9));
        assert!(d.is_clean());
    }

    #[test]
    fn ssvi_is_clean_both_ways() {
        let p = ssvi();
        assert!(p.is_arbitrage_free());
        for &tau in &[0.05, 0.1, 0.3, 1.0, 2.0, 3.0] {
            for mode in [DerivativeMode::Analytic, DerivativeMode::FiniteDifference] {
                let d = durrleman_g_with(&p, tau, &k_grid(), DEFAULT_FD_STEP, mode).unwrap();
                assert!(d.min_g >= -VIOLATION_TOL, "tau {tau} {mode:?} min_g {}", d.min_g);
            }
        }
    }

    #[test]
    fn finite_differences_agree_with_analytic() {
        let p = ssvi();
        for &tau in &[0.05, 0.25, 1.0, 2.5] {
            let a = durrleman_g_with(&p, tau, &k_grid(), DEFAULT_FD_STEP, DerivativeMode::Analytic).unwrap();
            let f = durrleman_g_with(&p, tau, &k_grid(), DEFAULT_FD_STEP, DerivativeMode::FiniteDifference).unwrap();
            for (x, y) in a.g_values.iter().zip(&f.g_values) {
                assert!((x - y).abs() <= 1e-4, "tau {tau}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn concave_slice_flags_violation_and_negative_density() {
        // w(k) = 0.04 - 1.5 k^2: w'' = -3 drives g(0) to -0.5.
        let bad = |k: f64, tau: f64| {
            let w = (0.04 - 1.5 * k * k).max(1e-4);
            Ok((w / tau).sqrt())
        };
        let grid = inclusive_range(-0.1, 0.1, 0.01);
        let d = durrleman_g(&bad, 1.0, &grid, DEFAULT_FD_STEP).unwrap();
        assert!(!d.violation_intervals.is_empty());
        assert!(d.min_g < 0.0);
        assert!(min_density(&bad, 1.0, &grid) < 0.0);
    }

    #[test]
    fn sign_of_g_matches_density() {
        let grid = inclusive_range(-0.3, 0.3, 0.01);
        let smiles: Vec<Box<dyn Fn(f64, f64) -> Result<f64>>> = vec![
            Box::new(|k, _| Ok(0.2 + 0.1 * k * k)),
            Box::new(|k, _| Ok(0.2 - 0.05 * k)),
            Box::new(|k, t: f64| Ok(((0.04 - 0.4 * k * k).max(1e-4) / t).sqrt())),
            Box::new(|k, _| Ok(0.25 - 0.8 * k + 1.0 * k * k)),
        ];
        for (i, s) in smiles.iter().enumerate() {
            let d = durrleman_g(s.as_ref(), 0.5, &grid, DEFAULT_FD_STEP).unwrap();
            let dens = min_density(s.as_ref(), 0.5, &grid);
            if d.min_g.abs() > 1e-6 && dens.abs() > 1e-6 {
                assert_eq!(d.min_g > 0.0, dens > 0.0, "smile {i}: g {} density {dens}", d.min_g);
            }
        }
    }

    #[test]
    fn report_counts_slices() {
        let p = ssvi();
        let taus = [0.1, 0.5, 1.0, 2.0];
        let clean = surface_report(&p, &taus, &k_grid()).unwrap();
        assert_eq!(clean.summary.fraction_clean, 1.0);
        assert_eq!(clean.summary.total_violation_width, 0.0);

        // Bad only at tau = 1.
        let mixed = move |k: f64, tau: f64| {
            if tau == 1.0 {
                Ok(((0.04 - 1.5 * k * k).max(1e-4) / tau).sqrt())
            } else {
                p.vol(k, tau)
            }
        };
        let r = surface_report(&mixed, &taus, &inclusive_range(-0.1, 0.1, 0.005)).unwrap();
        assert_eq!(r.summary.clean_slices, 3);
        assert_eq!(r.summary.fraction_clean, 0.75);
        assert!(r.summary.total_violation_width > 0.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 4 * 41);
        let back: ArbitrageReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.summary, r.summary);
    }

    #[test]
    fn runs_are_merged() {
        let k = [0.0, 0.1, 0.2, 0.3, 0.4];
        let g = [1.0, -1.0, -1.0, 1.0, -1.0];
        let runs = violation_runs(&k, &g, VIOLATION_TOL);
        assert_eq!(runs.len(), 2);
        assert!((runs[0].0 - 0.05).abs() < 1e-15 && (runs[0].1 - 0.25).abs() < 1e-15);
        assert!((runs[1].0 - 0.35).abs() < 1e-15 && runs[1].1 == 0.4);
    }

    #[test]
    fn non_positive_vol_is_an_error() {
        let zero = |_k: f64, _t: f64| Ok(0.0);
        assert!(durrleman_g(&zero, 1.0, &[0.0], DEFAULT_FD_STEP).is_err());
        let flat = |_k: f64, _t: f64| Ok(0.2);
        assert!(durrleman_g_with(&flat, 1.0, &[0.0], DEFAULT_FD_STEP, DerivativeMode::Analytic).is_err());
    }
}
