//! Paired out-of-sample evaluation: every model sees the same seeded context
//! per test day and is scored on the day's remaining quotes, in basis points.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arbitrage::{durrleman_g_batched, summarize, ArbitrageReport, DEFAULT_FD_STEP};
use crate::error::{Error, Result};
use crate::gp::{gp_fit, gp_predict, GpHyper};
use crate::sabr::{calibrate_term_structure, SabrTermStructure};
use crate::ssvi::{calibrate_ssvi, SsviParams};
use crate::types::{make_task, Coordinate, DayRecord, ForwardCurve, Quote, TaskSource};
use crate::volnp::VolNp;

/// Vol error to basis points: 0.01 vol is 100 BPS.
pub const BPS_PER_VOL: f64 = 1e4;

pub fn to_bps(vol_error: f64) -> f64 {
    vol_error * BPS_PER_VOL
}

// ---------------------------------------------------------------------------
// Adapters

/// A surface fitted to one day's context.
pub trait FittedSurface: Send + Sync {
    fn predict(&self, coords: &[Coordinate]) -> Result<Vec<f64>>;
}

/// Uniform interface over calibrated baselines and the meta-learned model.
pub trait ModelAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn fit_day<'a>(&'a self, context: &[Quote]) -> Result<Box<dyn FittedSurface + 'a>>;
}

/// Per-maturity Hagan SABR fitted on the context, linearly interpolated in tau.
#[derive(Debug, Clone)]
pub struct SabrAdapter {
    pub beta: f64,
}

impl Default for SabrAdapter {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl FittedSurface for SabrTermStructure {
    fn predict(&self, coords: &[Coordinate]) -> Result<Vec<f64>> {
        coords.iter().map(|c| self.vol(c.k, c.tau)).collect()
    }
}

impl ModelAdapter for SabrAdapter {
    fn name(&self) -> &str {
        "SABR"
    }

    fn fit_day<'a>(&'a self, context: &[Quote]) -> Result<Box<dyn FittedSurface + 'a>> {
        // Quotes are already in log-moneyness; with a unit forward strikes are e^k.
        Ok(Box::new(calibrate_term_structure(context, &ForwardCurve::default(), self.beta)?))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SsviAdapter;

impl FittedSurface for SsviParams {
    fn predict(&self, coords: &[Coordinate]) -> Result<Vec<f64>> {
        coords.iter().map(|c| self.vol(c.k, c.tau)).collect()
    }
}

impl ModelAdapter for SsviAdapter {
    fn name(&self) -> &str {
        "SSVI"
    }

    fn fit_day<'a>(&'a self, context: &[Quote]) -> Result<Box<dyn FittedSurface + 'a>> {
        Ok(Box::new(calibrate_ssvi(context, None)?))
    }
}

#[derive(Debug, Clone, Default)]
pub struct GpAdapter {
    pub init: GpHyper,
}

struct GpSurface(crate::gp::GpState);

impl FittedSurface for GpSurface {
    fn predict(&self, coords: &[Coordinate]) -> Result<Vec<f64>> {
        Ok(gp_predict(&self.0, coords).into_iter().map(|(m, _)| m).collect())
    }
}

impl ModelAdapter for GpAdapter {
    fn name(&self) -> &str {
        "GP"
    }

    fn fit_day<'a>(&'a self, context: &[Quote]) -> Result<Box<dyn FittedSurface + 'a>> {
        Ok(Box::new(GpSurface(gp_fit(context, self.init)?)))
    }
}

/// Frozen network; "fitting" only stores the context.
#[derive(Debug, Clone)]
pub struct VolNpAdapter {
    pub name: String,
    pub model: VolNp,
}

struct VolNpSurface<'a> {
    model: &'a VolNp,
    context: Vec<Quote>,
}

impl FittedSurface for VolNpSurface<'_> {
    fn predict(&self, coords: &[Coordinate]) -> Result<Vec<f64>> {
        Ok(self.model.predict(&self.context, coords)?.into_iter().map(|p| p.mu).collect())
    }
}

impl ModelAdapter for VolNpAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit_day<'a>(&'a self, context: &[Quote]) -> Result<Box<dyn FittedSurface + 'a>> {
        if context.is_empty() {
            return Err(Error::InsufficientQuotes { needed: 1, available: 0 });
        }
        Ok(Box::new(VolNpSurface { model: &self.model, context: context.to_vec() }))
    }
}

// ---------------------------------------------------------------------------
// Buckets and error accumulation

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaturityBucket {
    /// Up to three months.
    Short,
    /// Three months to one year.
    Mid,
    /// Beyond one year.
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoneynessBucket {
    /// |k| <= 0.05
    Atm,
    /// 0.05 < |k| <= 0.2
    Ntm,
    /// |k| > 0.2
    Ftm,
}

pub const MATURITY_EDGES: (f64, f64) = (0.25, 1.0);
pub const MONEYNESS_EDGES: (f64, f64) = (0.05, 0.2);

impl MaturityBucket {
    pub const ALL: [MaturityBucket; 3] = [MaturityBucket::Short, MaturityBucket::Mid, MaturityBucket::Long];

    pub fn of(tau: f64) -> Self {
        if tau <= MATURITY_EDGES.0 {
            MaturityBucket::Short
        } else if tau <= MATURITY_EDGES.1 {
            MaturityBucket::Mid
        } else {
            MaturityBucket::Long
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MaturityBucket::Short => "short",
            MaturityBucket::Mid => "mid",
            MaturityBucket::Long => "long",
        }
    }
}

impl MoneynessBucket {
    pub const ALL: [MoneynessBucket; 3] = [MoneynessBucket::Atm, MoneynessBucket::Ntm, MoneynessBucket::Ftm];

    pub fn of(k: f64) -> Self {
        let a = k.abs();
        if a <= MONEYNESS_EDGES.0 {
            MoneynessBucket::Atm
        } else if a <= MONEYNESS_EDGES.1 {
            MoneynessBucket::Ntm
        } else {
            MoneynessBucket::Ftm
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MoneynessBucket::Atm => "atm",
            MoneynessBucket::Ntm => "ntm",
            MoneynessBucket::Ftm => "ftm",
        }
    }
}

/// Running sums of vol errors (in vol units).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub count: usize,
}

impl Accumulator {
    pub fn push(&mut self, err: f64) {
        self.sum_sq += err * err;
        self.sum_abs += err.abs();
        self.count += 1;
    }

    pub fn stats(&self) -> ErrorStats {
        if self.count == 0 {
            return ErrorStats { rmse_bps: None, mae_bps: None, count: 0 };
        }
        let n = self.count as f64;
        ErrorStats {
            rmse_bps: Some(to_bps((self.sum_sq / n).sqrt())),
            mae_bps: Some(to_bps(self.sum_abs / n)),
            count: self.count,
        }
    }
}

/// RMSE and MAE in BPS; `None` for an empty cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse_bps: Option<f64>,
    pub mae_bps: Option<f64>,
    pub count: usize,
}

impl ErrorStats {
    pub fn rmse(&self) -> f64 {
        self.rmse_bps.unwrap_or(f64::NAN)
    }

    pub fn mae(&self) -> f64 {
        self.mae_bps.unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub model_name: String,
    pub n_context: usize,
    pub seed: u64,
    pub n_days: usize,
    pub skipped_days: Vec<usize>,
    pub overall: ErrorStats,
    pub by_maturity: BTreeMap<MaturityBucket, ErrorStats>,
    pub by_moneyness: BTreeMap<MoneynessBucket, ErrorStats>,
}

impl ErrorReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Count-weighted recombination of a stratification's squared RMSEs, in BPS^2.
    pub fn recombined_mse<K>(cells: &BTreeMap<K, ErrorStats>) -> f64 {
        let n: usize = cells.values().map(|c| c.count).sum();
        cells.values().filter(|c| c.count > 0).map(|c| c.rmse().powi(2) * c.count as f64).sum::<f64>() / n as f64
    }
}

/// Long-format CSV: `model,stratum,bucket,rmse_bps,mae_bps,count`.
pub fn write_reports_csv<W: Write>(out: W, reports: &[ErrorReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "stratum", "bucket", "rmse_bps", "mae_bps", "count"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let mut row = |stratum: &str, bucket: &str, s: &ErrorStats| {
            w.write_record([&r.model_name, stratum, bucket, &opt(s.rmse_bps), &opt(s.mae_bps), &s.count.to_string()])
        };
        row("overall", "all", &r.overall)?;
        for (b, s) in &r.by_maturity {
            row("maturity", b.label(), s)?;
        }
        for (b, s) in &r.by_moneyness {
            row("moneyness", b.label(), s)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Paired predictions

/// Seed of the context draw for one day; shared by every model and every context size.
pub fn day_seed(seed: u64, day_id: usize) -> u64 {
    seed ^ (day_id as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Every model's predictions on one day's targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPredictions {
    pub day_id: usize,
    pub targets: Vec<Quote>,
    /// One vector per model, aligned with `targets`.
    pub predictions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedPredictions {
    pub model_names: Vec<String>,
    pub n_context: usize,
    pub seed: u64,
    pub days: Vec<DayPredictions>,
    pub skipped_days: Vec<usize>,
}

fn predict_one_day(adapters: &[&dyn ModelAdapter], day: &DayRecord, n_context: usize, seed: u64) -> Result<DayPredictions> {
    let task = make_task(day, n_context, None, TaskSource::RealToReal, day_seed(seed, day.day_id))?;
    let coords = task.target_coords();
    let predictions = adapters
        .iter()
        .map(|a| {
            let preds = a.fit_day(&task.context)?.predict(&coords)?;
            if preds.len() != coords.len() {
                return Err(Error::LengthMismatch(coords.len(), preds.len()));
            }
            if let Some(bad) = preds.iter().find(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("{} predicted non-finite vol {bad}", a.name())));
            }
            Ok(preds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DayPredictions { day_id: day.day_id, targets: task.targets, predictions })
}

/// Draw each day's context once and collect every model's predictions on the
/// remaining quotes. A day on which any model fails is dropped for all of them.
pub fn paired_predictions(
    adapters: &[&dyn ModelAdapter],
    test_days: &[DayRecord],
    n_context: usize,
    seed: u64,
) -> Result<PairedPredictions> {
    if adapters.is_empty() {
        return Err(Error::Domain("no models to evaluate".into()));
    }
    let results: Vec<Result<DayPredictions>> = test_days.par_iter().map(|d| predict_one_day(adapters, d, n_context, seed)).collect();
    let mut days = Vec::new();
    let mut skipped_days = Vec::new();
    for (day, res) in test_days.iter().zip(results) {
        match res {
            Ok(p) => days.push(p),
            Err(e) => {
                log::warn!("day {} ({}) skipped for all models: {e}", day.day_id, day.date);
                skipped_days.push(day.day_id);
            }
        }
    }
    Ok(PairedPredictions {
        model_names: adapters.iter().map(|a| a.name().to_string()).collect(),
        n_context,
        seed,
        days,
        skipped_days,
    })
}

impl PairedPredictions {
    /// Reports in adapter order, accumulated in day order.
    pub fn reports(&self) -> Vec<ErrorReport> {
        (0..self.model_names.len()).map(|m| self.report(m)).collect()
    }

    fn report(&self, m: usize) -> ErrorReport {
        let mut overall = Accumulator::default();
        let mut mat: BTreeMap<MaturityBucket, Accumulator> = MaturityBucket::ALL.iter().map(|&b| (b, Accumulator::default())).collect();
        let mut mon: BTreeMap<MoneynessBucket, Accumulator> = MoneynessBucket::ALL.iter().map(|&b| (b, Accumulator::default())).collect();
        for day in &self.days {
            for (t, &p) in day.targets.iter().zip(&day.predictions[m]) {
                let err = p - t.vol;
                overall.push(err);
                mat.get_mut(&MaturityBucket::of(t.tau())).unwrap().push(err);
                mon.get_mut(&MoneynessBucket::of(t.k())).unwrap().push(err);
            }
        }
        ErrorReport {
            model_name: self.model_names[m].clone(),
            n_context: self.n_context,
            seed: self.seed,
            n_days: self.days.len(),
            skipped_days: self.skipped_days.clone(),
            overall: overall.stats(),
            by_maturity: mat.into_iter().map(|(b, a)| (b, a.stats())).collect(),
            by_moneyness: mon.into_iter().map(|(b, a)| (b, a.stats())).collect(),
        }
    }
}

/// Paired evaluation of several models with `n_context` quotes per day.
pub fn evaluate_models(adapters: &[&dyn ModelAdapter], test_days: &[DayRecord], n_context: usize, seed: u64) -> Result<Vec<ErrorReport>> {
    Ok(paired_predictions(adapters, test_days, n_context, seed)?.reports())
}

pub fn evaluate(adapter: &dyn ModelAdapter, test_days: &[DayRecord], n_context: usize, seed: u64) -> Result<ErrorReport> {
    Ok(evaluate_models(&[adapter], test_days, n_context, seed)?.remove(0))
}

// ---------------------------------------------------------------------------
// Sparsity sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_context: usize,
    pub reports: Vec<ErrorReport>,
}

/// Paired evaluation at each context size. The per-day draw does not depend
/// on n, so smaller contexts are subsets of larger ones.
pub fn sparsity_sweep(adapters: &[&dyn ModelAdapter], test_days: &[DayRecord], n_list: &[usize], seed: u64) -> Result<Vec<SweepRow>> {
    if n_list.is_empty() {
        return Err(Error::Domain("empty context-size list".into()));
    }
    n_list
        .iter()
        .map(|&n| Ok(SweepRow { n_context: n, reports: evaluate_models(adapters, test_days, n, seed)? }))
        .collect()
}

/// `n_context,model,rmse_bps,mae_bps,count,n_days`
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_context", "model", "rmse_bps", "mae_bps", "count", "n_days"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        for r in &row.reports {
            w.write_record([
                row.n_context.to_string(),
                r.model_name.clone(),
                opt(r.overall.rmse_bps),
                opt(r.overall.mae_bps),
                r.overall.count.to_string(),
                r.n_days.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Heatmap

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub k_lo: f64,
    pub k_hi: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub rmse_bps: Option<f64>,
    pub count: usize,
}

/// Cells in tau-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub model_name: String,
    pub cells: Vec<HeatCell>,
}

fn validate_edges(edges: &[f64], what: &str) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain(format!("{what} bin edges must be at least two increasing values")));
    }
    Ok(())
}

/// Index of the bin holding `x`; bins are `[lo, hi)` except the last, and
/// points beyond the outer edges fall into the outermost bins.
fn bin_index(edges: &[f64], x: f64) -> usize {
    let n = edges.len() - 1;
    edges[1..n].iter().take_while(|&&e| x >= e).count()
}

/// Pool `(target, prediction)` pairs into a `k x tau` grid.
pub fn heatmap_from_pairs<'a, I>(model_name: &str, pairs: I, k_edges: &[f64], tau_edges: &[f64]) -> Result<Heatmap>
where
    I: IntoIterator<Item = (&'a Quote, f64)>,
{
    validate_edges(k_edges, "k")?;
    validate_edges(tau_edges, "tau")?;
    let nk = k_edges.len() - 1;
    let mut acc = vec![Accumulator::default(); nk * (tau_edges.len() - 1)];
    for (t, p) in pairs {
        acc[bin_index(tau_edges, t.tau()) * nk + bin_index(k_edges, t.k())].push(p - t.vol);
    }
    let cells = acc
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let (ti, ki) = (i / nk, i % nk);
            HeatCell {
                k_lo: k_edges[ki],
                k_hi: k_edges[ki + 1],
                tau_lo: tau_edges[ti],
                tau_hi: tau_edges[ti + 1],
                rmse_bps: a.stats().rmse_bps,
                count: a.count,
            }
        })
        .collect();
    Ok(Heatmap { model_name: model_name.to_string(), cells })
}

pub fn error_heatmap(
    adapter: &dyn ModelAdapter,
    test_days: &[DayRecord],
    k_edges: &[f64],
    tau_edges: &[f64],
    n_context: usize,
    seed: u64,
) -> Result<Heatmap> {
    validate_edges(k_edges, "k")?;
    validate_edges(tau_edges, "tau")?;
    let paired = paired_predictions(&[adapter], test_days, n_context, seed)?;
    let pairs = paired.days.iter().flat_map(|d| d.targets.iter().zip(d.predictions[0].iter().copied()));
    heatmap_from_pairs(adapter.name(), pairs, k_edges, tau_edges)
}

impl Heatmap {
    /// `k_lo,k_hi,tau_lo,tau_hi,rmse_bps,count`; empty cells leave rmse blank.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k_lo", "k_hi", "tau_lo", "tau_hi", "rmse_bps", "count"])?;
        for c in &self.cells {
            w.write_record([
                c.k_lo.to_string(),
                c.k_hi.to_string(),
                c.tau_lo.to_string(),
                c.tau_hi.to_string(),
                c.rmse_bps.map(|v| v.to_string()).unwrap_or_default(),
                c.count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }
}

// ---------------------------------------------------------------------------
// Arbitrage of fitted surfaces

/// Durrleman report of a fitted surface, one batched prediction per slice.
pub fn fitted_arbitrage_report(surface: &dyn FittedSurface, tau_list: &[f64], k_grid: &[f64]) -> Result<ArbitrageReport> {
    if tau_list.is_empty() {
        return Err(Error::Domain("empty maturity list".into()));
    }
    let slices = tau_list
        .iter()
        .map(|&tau| durrleman_g_batched(|c| surface.predict(c), tau, k_grid, DEFAULT_FD_STEP))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(slices))
}

/// Durrleman report of `adapter` fitted on each day's seeded evaluation context,
/// at the day's quoted maturities.
pub fn arbitrage_by_day(
    adapter: &dyn ModelAdapter,
    days: &[DayRecord],
    k_grid: &[f64],
    n_context: usize,
    seed: u64,
) -> Vec<(usize, Result<ArbitrageReport>)> {
    days.par_iter()
        .map(|day| {
            let report = make_task(day, n_context, None, TaskSource::RealToReal, day_seed(seed, day.day_id))
                .and_then(|task| adapter.fit_day(&task.context))
                .and_then(|fitted| fitted_arbitrage_report(fitted.as_ref(), &day.maturities(), k_grid));
            (day.day_id, report)
        })
        .collect()
}
