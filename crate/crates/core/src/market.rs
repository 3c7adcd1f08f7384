//! Quote ingestion, on-disk day bundles, synthetic markets and SABR prior surfaces.
//!
//! Bundle layout under a root directory:
//!
//! ```text
//! days/<YYYY-MM-DD>/quotes.csv         date,expiry,strike,type,bid,ask,forward,discount_factor
//! days/<YYYY-MM-DD>/sabr_surface.csv   k,tau,vol   (written by the prior builder)
//! days/<YYYY-MM-DD>/truth_surface.csv  k,tau,vol   (synthetic markets only)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackvol::{black_price, implied_vol, norm_cdf, BlackInputs};
use crate::error::{Error, Result};
use crate::sabr::{calibrate_term_structure, generate_surface, hagan_vol, GridConfig, SabrParams};
use crate::ssvi::{eta_ceiling, SsviParams};
use crate::types::{DayRecord, ForwardCurve, OptionType, Quote, RawQuoteRecord, MAX_VOL};

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Quotes need a bid strictly above this.
    pub min_bid: f64,
    /// Cap on (ask - bid) / mid.
    pub max_rel_spread: f64,
    pub k_range: (f64, f64),
    pub tau_range: (f64, f64),
    /// Keep one quote per (expiry, strike), preferring the out-of-the-money side.
    pub dedup: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { min_bid: 0.0, max_rel_spread: 0.5, k_range: (-0.8, 0.8), tau_range: (7.0 / 365.0, 3.0), dedup: true }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_range.0 >= self.k_range.1 || self.tau_range.0 >= self.tau_range.1 || self.max_rel_spread < 0.0 {
            return Err(Error::Domain(format!("invalid preprocessing ranges {self:?}")));
        }
        Ok(())
    }
}

/// Counts of what happened to each record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total: usize,
    pub invalid: usize,
    pub illiquid: usize,
    pub out_of_range: usize,
    pub duplicate: usize,
    pub inversion_failed: usize,
    pub kept: usize,
}

fn otm_type(strike: f64, forward: f64) -> OptionType {
    if strike >= forward {
        OptionType::Call
    } else {
        OptionType::Put
    }
}

/// Turn one day's raw quotes into implied-vol quotes.
pub fn ingest_day(records: &[RawQuoteRecord], cfg: &PreprocessConfig, day_id: usize) -> Result<DayRecord> {
    let (day, stats) = ingest_day_with_stats(records, cfg, day_id)?;
    log::info!(
        "ingested {}: kept {} of {} (invalid {}, illiquid {}, out of range {}, duplicate {}, inversion failed {})",
        day.date,
        stats.kept,
        stats.total,
        stats.invalid,
        stats.illiquid,
        stats.out_of_range,
        stats.duplicate,
        stats.inversion_failed
    );
    Ok(day)
}

pub fn ingest_day_with_stats(
    records: &[RawQuoteRecord],
    cfg: &PreprocessConfig,
    day_id: usize,
) -> Result<(DayRecord, IngestStats)> {
    cfg.validate()?;
    let date = records.first().map(|r| r.date).ok_or_else(|| Error::EmptyAfterFilter("no records".into()))?;
    if records.iter().any(|r| r.date != date) {
        return Err(Error::Domain("records span more than one trade date".into()));
    }
    let mut stats = IngestStats { total: records.len(), ..Default::default() };

    let mut survivors: Vec<&RawQuoteRecord> = Vec::new();
    for r in records {
        if r.validate().is_err() {
            stats.invalid += 1;
            continue;
        }
        let mid = 0.5 * (r.bid + r.ask);
        if !(r.bid > cfg.min_bid) || (r.ask - r.bid) / mid > cfg.max_rel_spread {
            stats.illiquid += 1;
            continue;
        }
        let k = (r.strike / r.forward).ln();
        let tau = r.tau();
        if k < cfg.k_range.0 || k > cfg.k_range.1 || tau < cfg.tau_range.0 || tau > cfg.tau_range.1 {
            stats.out_of_range += 1;
            continue;
        }
        survivors.push(r);
    }

    if cfg.dedup {
        let mut by_key: BTreeMap<(NaiveDate, u64), &RawQuoteRecord> = BTreeMap::new();
        for r in survivors {
            let key = (r.expiry, r.strike.to_bits());
            match by_key.get(&key) {
                None => {
                    by_key.insert(key, r);
                }
                Some(existing) => {
                    stats.duplicate += 1;
                    let otm = otm_type(r.strike, r.forward);
                    if existing.option_type != otm && r.option_type == otm {
                        by_key.insert(key, r);
                    }
                }
            }
        }
        survivors = by_key.into_values().collect();
    }

    let mut quotes = Vec::with_capacity(survivors.len());
    let mut forwards = Vec::new();
    for r in survivors {
        let tau = r.tau();
        let mid = 0.5 * (r.bid + r.ask);
        let inverted = BlackInputs::new(r.forward, r.strike, tau, r.discount_factor, r.option_type)
            .and_then(|inp| implied_vol(&inp, mid))
            .and_then(|vol| Quote::new((r.strike / r.forward).ln(), tau, vol));
        match inverted {
            Ok(q) => {
                quotes.push(q);
                forwards.push((tau, r.forward));
            }
            Err(_) => stats.inversion_failed += 1,
        }
    }
    stats.kept = quotes.len();
    if quotes.is_empty() {
        return Err(Error::EmptyAfterFilter(format!("no usable quotes on {date}")));
    }
    sort_quotes(&mut quotes);
    let day = DayRecord::new(day_id, date, quotes, ForwardCurve::from_points(forwards))?;
    Ok((day, stats))
}

fn sort_quotes(quotes: &mut [Quote]) {
    quotes.sort_by(|a, b| a.tau().total_cmp(&b.tau()).then(a.k().total_cmp(&b.k())));
}

// ---------------------------------------------------------------------------
// CSV files and bundles

pub fn read_quote_records(path: &Path) -> Result<Vec<RawQuoteRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<RawQuoteRecord>, _>>()?)
}

pub fn write_quote_records(path: &Path, records: &[RawQuoteRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SurfaceRow {
    k: f64,
    tau: f64,
    vol: f64,
}

pub fn read_surface_csv(path: &Path) -> Result<Vec<Quote>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<SurfaceRow>()
        .map(|row| {
            let row = row?;
            Quote::new(row.k, row.tau, row.vol)
        })
        .collect()
}

pub fn write_surface_csv(path: &Path, quotes: &[Quote]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for q in quotes {
        w.serialize(SurfaceRow { k: q.k(), tau: q.tau(), vol: q.vol })?;
    }
    w.flush()?;
    Ok(())
}

/// Raw records that reproduce `day`'s quotes: out-of-the-money options priced at
/// the quoted vol with zero spread, discounted at a flat `rate`.
pub fn day_to_raw_records(day: &DayRecord, rate: f64) -> Result<Vec<RawQuoteRecord>> {
    day.quotes
        .iter()
        .map(|q| {
            let forward = day
                .forward_curve
                .forward(q.tau())
                .ok_or_else(|| Error::Domain(format!("day {} has no forward curve", day.date)))?;
            let strike = forward * q.k().exp();
            let discount_factor = (-rate * q.tau()).exp();
            let option_type = otm_type(strike, forward);
            let price = black_price(&BlackInputs::new(forward, strike, q.tau(), discount_factor, option_type)?, q.vol)?;
            let expiry = day.date + Duration::days((q.tau() * 365.0).round() as i64);
            Ok(RawQuoteRecord {
                date: day.date,
                expiry,
                strike,
                option_type,
                bid: price,
                ask: price,
                forward,
                discount_factor,
            })
        })
        .collect()
}

pub const QUOTES_FILE: &str = "quotes.csv";
pub const SABR_SURFACE_FILE: &str = "sabr_surface.csv";
pub const TRUTH_SURFACE_FILE: &str = "truth_surface.csv";

pub fn day_dir(root: &Path, date: NaiveDate) -> PathBuf {
    root.join("days").join(date.format("%Y-%m-%d").to_string())
}

/// Write every day's quotes plus whichever surfaces it carries.
pub fn write_bundle(root: &Path, days: &[DayRecord], rate: f64) -> Result<()> {
    for day in days {
        let dir = day_dir(root, day.date);
        std::fs::create_dir_all(&dir)?;
        write_quote_records(&dir.join(QUOTES_FILE), &day_to_raw_records(day, rate)?)?;
        write_day_surfaces(root, day)?;
    }
    Ok(())
}

/// Write only the surface files of a day (e.g. after building priors).
pub fn write_day_surfaces(root: &Path, day: &DayRecord) -> Result<()> {
    let dir = day_dir(root, day.date);
    std::fs::create_dir_all(&dir)?;
    if let Some(s) = &day.synthetic_surface {
        write_surface_csv(&dir.join(SABR_SURFACE_FILE), s)?;
    }
    if let Some(s) = &day.ground_truth {
        write_surface_csv(&dir.join(TRUTH_SURFACE_FILE), s)?;
    }
    Ok(())
}

/// Load every day directory in date order; day ids follow that order.
pub fn load_bundle(root: &Path, cfg: &PreprocessConfig) -> Result<Vec<DayRecord>> {
    let days_root = root.join("days");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&days_root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let loaded: Vec<Result<DayRecord>> = dirs
        .par_iter()
        .enumerate()
        .map(|(id, dir)| {
            let records = read_quote_records(&dir.join(QUOTES_FILE))?;
            let mut day = ingest_day(&records, cfg, id)?;
            let sabr = dir.join(SABR_SURFACE_FILE);
            if sabr.exists() {
                day.synthetic_surface = Some(read_surface_csv(&sabr)?);
            }
            let truth = dir.join(TRUTH_SURFACE_FILE);
            if truth.exists() {
                day.ground_truth = Some(read_surface_csv(&truth)?);
            }
            Ok(day)
        })
        .collect();
    let days = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    if days.is_empty() {
        return Err(Error::EmptyAfterFilter(format!("no day directories under {}", days_root.display())));
    }
    Ok(days)
}

// ---------------------------------------------------------------------------
// SABR prior surfaces

/// Calibrate SABR per day and attach the dense prior surface. Days whose
/// calibration fails keep `synthetic_surface = None` and are logged.
pub fn build_pretraining_surfaces(days: Vec<DayRecord>, grid: &GridConfig, beta: f64) -> Vec<DayRecord> {
    days.into_par_iter()
        .map(|mut day| {
            let built = calibrate_term_structure(&day.quotes, &day.forward_curve, beta)
                .and_then(|ts| generate_surface(&ts, &grid.k_grid(), &grid.tau_grid(&day.maturities())));
            match built {
                Ok(surface) => day.synthetic_surface = Some(surface),
                Err(e) => {
                    log::warn!("day {} unusable for pre-training: {e}", day.date);
                    day.synthetic_surface = None;
                }
            }
            day
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic markets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Power-law SSVI surfaces: free of static arbitrage by construction.
    SsviRandom,
    /// Variance mixture of two SABR smiles with smooth maturity dependence;
    /// neither SABR nor SSVI can represent it exactly.
    SabrMixture,
}

/// Parameter ranges; each day's value is `lo + (hi - lo) * Phi(z)` for an AR(1) factor `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeParams {
    pub atm_vol_short: (f64, f64),
    pub atm_vol_long: (f64, f64),
    /// Maturity scale of the ATM term structure, in years.
    pub term_decay: (f64, f64),
    pub rho: (f64, f64),
    /// SSVI: fraction of the admissible eta. SABR mixture: vol-of-vol.
    pub curvature: (f64, f64),
    /// SSVI power-law exponent.
    pub gamma: (f64, f64),
    /// Weight of the second mixture component at the short end.
    pub mixture_weight: (f64, f64),
    /// Day-to-day autocorrelation of the factors.
    pub persistence: f64,
}

impl Default for RegimeParams {
    fn default() -> Self {
        Self {
            atm_vol_short: (0.12, 0.40),
            atm_vol_long: (0.16, 0.28),
            term_decay: (0.2, 1.2),
            rho: (-0.8, -0.2),
            curvature: (0.3, 0.9),
            gamma: (0.2, 0.5),
            mixture_weight: (0.1, 0.5),
            persistence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuoteLayout {
    /// Shares of short (<= 3M), mid (3M-1Y) and long (> 1Y) quotes.
    pub maturity_shares: [f64; 3],
    /// Shares of ATM (|k| <= 0.05), NTM (0.05-0.2) and FTM (> 0.2) quotes.
    pub moneyness_shares: [f64; 3],
    /// Listed expiries per bucket, in calendar days.
    pub short_expiries: Vec<u32>,
    pub mid_expiries: Vec<u32>,
    pub long_expiries: Vec<u32>,
}

impl Default for QuoteLayout {
    fn default() -> Self {
        Self {
            maturity_shares: [0.750, 0.203, 0.047],
            moneyness_shares: [0.500, 0.414, 0.086],
            short_expiries: vec![7, 14, 21, 30, 45, 60, 75, 90],
            mid_expiries: vec![120, 150, 180, 240, 300, 365],
            long_expiries: vec![456, 548, 730, 1095],
        }
    }
}

impl QuoteLayout {
    pub fn validate(&self) -> Result<()> {
        for shares in [&self.maturity_shares, &self.moneyness_shares] {
            if shares.iter().any(|&s| s < 0.0) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("bucket shares {shares:?} must be non-negative and sum to 1")));
            }
        }
        let check = |days: &[u32], lo: f64, hi: f64| days.iter().all(|&d| d as f64 / 365.0 > lo && d as f64 / 365.0 <= hi);
        if self.short_expiries.is_empty()
            || self.mid_expiries.is_empty()
            || self.long_expiries.is_empty()
            || !check(&self.short_expiries, 0.0, 0.25)
            || !check(&self.mid_expiries, 0.25, 1.0)
            || !check(&self.long_expiries, 1.0, f64::INFINITY)
        {
            return Err(Error::Domain("expiries must be non-empty and inside their maturity buckets".into()));
        }
        Ok(())
    }

    pub fn all_expiries(&self) -> Vec<u32> {
        let mut all: Vec<u32> =
            self.short_expiries.iter().chain(&self.mid_expiries).chain(&self.long_expiries).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticMarketConfig {
    pub n_days: usize,
    pub seed: u64,
    pub generator: Generator,
    pub regime: RegimeParams,
    /// Standard deviation of the additive vol noise, in basis points.
    pub noise_bps: f64,
    pub quotes_per_day: usize,
    pub layout: QuoteLayout,
    pub start_date: NaiveDate,
    pub spot: f64,
    pub rate: f64,
    pub dividend_yield: f64,
    /// k spacing of the stored noise-free grid.
    pub truth_k_step: f64,
}

impl Default for SyntheticMarketConfig {
    fn default() -> Self {
        Self {
            n_days: 250,
            seed: 7,
            generator: Generator::SsviRandom,
            regime: RegimeParams::default(),
            noise_bps: 30.0,
            quotes_per_day: 350,
            layout: QuoteLayout::default(),
            start_date: NaiveDate::from_ymd_opt(2020, 1, 2).expect("valid date"),
            spot: 100.0,
            rate: 0.02,
            dividend_yield: 0.015,
            truth_k_step: 0.05,
        }
    }
}

/// SABR parameters of one mixture component as functions of maturity (beta = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SabrMixture {
    pub atm_short: f64,
    pub atm_long: f64,
    pub decay: f64,
    pub rho: f64,
    pub nu: f64,
    pub weight: f64,
}

impl SabrMixture {
    fn components(&self, tau: f64) -> [(SabrParams, f64); 2] {
        let e = (-tau / self.decay).exp();
        let alpha = self.atm_long + (self.atm_short - self.atm_long) * e;
        let nu = self.nu / (tau + 0.1).powf(0.35);
        let rho = self.rho * (0.6 + 0.4 * (-tau).exp());
        let w = self.weight * (0.3 + 0.7 * e);
        let calm = SabrParams { alpha, beta: 1.0, rho, nu };
        let stress = SabrParams {
            alpha: 1.4 * alpha,
            beta: 1.0,
            rho: (rho - 0.3).max(-0.95),
            nu: 0.5 * nu,
        };
        [(calm, 1.0 - w), (stress, w)]
    }

    pub fn vol(&self, k: f64, tau: f64) -> Result<f64> {
        let mut var = 0.0;
        for (p, w) in self.components(tau) {
            let v = hagan_vol(&p, 1.0, k.exp(), tau)?;
            var += w * v * v;
        }
        Ok(var.sqrt())
    }
}

/// The noise-free surface behind one synthetic day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSurface {
    Ssvi(SsviParams),
    SabrMixture(SabrMixture),
}

impl TruthSurface {
    pub fn vol(&self, k: f64, tau: f64) -> Result<f64> {
        match self {
            TruthSurface::Ssvi(p) => p.vol(k, tau),
            TruthSurface::SabrMixture(m) => m.vol(k, tau),
        }
    }
}

const N_FACTORS: usize = 7;

fn in_range(range: (f64, f64), z: f64) -> f64 {
    range.0 + (range.1 - range.0) * norm_cdf(z)
}

fn truth_for_day(cfg: &SyntheticMarketConfig, z: &[f64; N_FACTORS], expiries: &[u32]) -> Result<TruthSurface> {
    let r = &cfg.regime;
    let atm_short = in_range(r.atm_vol_short, z[0]);
    let atm_long = in_range(r.atm_vol_long, z[1]);
    let decay = in_range(r.term_decay, z[2]);
    let rho = in_range(r.rho, z[3]);
    Ok(match cfg.generator {
        Generator::SsviRandom => {
            // theta(tau) = s_inf^2 tau + (s_0^2 - s_inf^2) decay (1 - exp(-tau / decay)) is increasing in tau.
            let (s0, s1) = (atm_short * atm_short, atm_long * atm_long);
            let theta_curve: Vec<(f64, f64)> = expiries
                .iter()
                .map(|&d| {
                    let tau = d as f64 / 365.0;
                    (tau, s1 * tau + (s0 - s1) * decay * (1.0 - (-tau / decay).exp()))
                })
                .collect();
            let gamma = in_range(r.gamma, z[5]);
            let thetas: Vec<f64> = theta_curve.iter().map(|&(_, th)| th).collect();
            let eta = in_range(r.curvature, z[4]) * eta_ceiling(&thetas, rho, gamma);
            let p = SsviParams { theta_curve, rho, eta, gamma_exp: gamma };
            p.validate()?;
            TruthSurface::Ssvi(p)
        }
        Generator::SabrMixture => TruthSurface::SabrMixture(SabrMixture {
            atm_short,
            atm_long,
            decay,
            rho,
            nu: in_range(r.curvature, z[4]) * 1.6,
            weight: in_range(r.mixture_weight, z[6]),
        }),
    })
}

fn next_business_day(d: NaiveDate) -> NaiveDate {
    let mut next = d + Duration::days(1);
    while matches!(next.weekday(), Weekday::Sat | Weekday::Sun) {
        next += Duration::days(1);
    }
    next
}

fn first_business_day(d: NaiveDate) -> NaiveDate {
    if matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        next_business_day(d)
    } else {
        d
    }
}

/// Largest |k| quoted at maturity `tau`: far wings are only listed for longer expiries.
fn k_limit(tau: f64) -> f64 {
    (0.2 + 0.5 * tau.sqrt()).min(0.8)
}

fn sample_k(bucket: usize, tau: f64, rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = match bucket {
        0 => rng.gen_range(0.0..0.05),
        1 => rng.gen_range(0.05..0.2),
        _ => rng.gen_range(0.2..k_limit(tau)),
    };
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Seeded synthetic market with the noise-free grid attached to every day.
pub fn generate_market(cfg: &SyntheticMarketConfig) -> Result<Vec<DayRecord>> {
    Ok(generate_market_with_truth(cfg)?.into_iter().map(|(d, _)| d).collect())
}

pub fn generate_market_with_truth(cfg: &SyntheticMarketConfig) -> Result<Vec<(DayRecord, TruthSurface)>> {
    cfg.layout.validate()?;
    if !(cfg.noise_bps >= 0.0) || cfg.quotes_per_day == 0 || !(cfg.regime.persistence.abs() < 1.0) {
        return Err(Error::Domain("invalid synthetic market configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let maturity_pick = WeightedIndex::new(cfg.layout.maturity_shares).map_err(|e| Error::Domain(e.to_string()))?;
    let moneyness_pick = WeightedIndex::new(cfg.layout.moneyness_shares).map_err(|e| Error::Domain(e.to_string()))?;
    let buckets = [&cfg.layout.short_expiries, &cfg.layout.mid_expiries, &cfg.layout.long_expiries];
    let expiries = cfg.layout.all_expiries();
    let phi = cfg.regime.persistence;
    let innovation = (1.0 - phi * phi).sqrt();
    let noise = cfg.noise_bps * 1e-4;
    let k_truth = crate::sabr::inclusive_range(-0.5, 0.5, cfg.truth_k_step);

    let mut z = [0.0; N_FACTORS];
    for f in z.iter_mut() {
        *f = rng.sample(StandardNormal);
    }
    let mut spot = cfg.spot;
    let mut date = first_business_day(cfg.start_date);
    let mut out = Vec::with_capacity(cfg.n_days);
    for day_id in 0..cfg.n_days {
        if day_id > 0 {
            for f in z.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *f = phi * *f + innovation * e;
            }
            let e: f64 = rng.sample(StandardNormal);
            spot *= (0.01 * e).exp();
            date = next_business_day(date);
        }
        let truth = truth_for_day(cfg, &z, &expiries)?;

        let mut quotes = Vec::with_capacity(cfg.quotes_per_day);
        while quotes.len() < cfg.quotes_per_day {
            let list = buckets[maturity_pick.sample(&mut rng)];
            let tau = list[rng.gen_range(0..list.len())] as f64 / 365.0;
            let k = sample_k(moneyness_pick.sample(&mut rng), tau, &mut rng);
            let eps: f64 = rng.sample(StandardNormal);
            let vol = truth.vol(k, tau)? + noise * eps;
            // Redraw the rare noisy vol that leaves the admissible range.
            if vol > 0.0 && vol < MAX_VOL {
                quotes.push(Quote::new(k, tau, vol)?);
            }
        }
        sort_quotes(&mut quotes);

        let drift = cfg.rate - cfg.dividend_yield;
        let forward_curve =
            ForwardCurve::from_points(expiries.iter().map(|&d| (d as f64 / 365.0, spot * (drift * d as f64 / 365.0).exp())).collect());
        let mut grid = Vec::with_capacity(k_truth.len() * expiries.len());
        for &d in &expiries {
            let tau = d as f64 / 365.0;
            for &k in &k_truth {
                grid.push(Quote::new(k, tau, truth.vol(k, tau)?)?);
            }
        }
        let mut day = DayRecord::new(day_id, date, quotes, forward_curve)?;
        day.ground_truth = Some(grid);
        out.push((day, truth));
    }
    Ok(out)
}
