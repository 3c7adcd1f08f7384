//! Domain types shared across the crate and deterministic task construction.

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper sanity cap on implied volatility (absolute units).
pub const MAX_VOL: f64 = 5.0;

/// A point on the surface: log-moneyness `k = ln(K/F)` and time-to-expiry in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub k: f64,
    pub tau: f64,
}

impl Coordinate {
    pub fn new(k: f64, tau: f64) -> Result<Self> {
        if !k.is_finite() {
            return Err(Error::Domain(format!("log-moneyness must be finite, got {k}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("time-to-expiry must be positive, got {tau}")));
        }
        Ok(Self { k, tau })
    }

    /// Exact (k, tau) equality, the identity used for context/target disjointness.
    pub fn same_point(&self, other: &Coordinate) -> bool {
        self.k.to_bits() == other.k.to_bits() && self.tau.to_bits() == other.tau.to_bits()
    }
}

/// One implied-volatility observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub coord: Coordinate,
    pub vol: f64,
}

impl Quote {
    pub fn new(k: f64, tau: f64, vol: f64) -> Result<Self> {
        let coord = Coordinate::new(k, tau)?;
        if !(vol > 0.0 && vol < MAX_VOL) {
            return Err(Error::Domain(format!("implied vol {vol} outside (0, {MAX_VOL})")));
        }
        Ok(Self { coord, vol })
    }

    pub fn k(&self) -> f64 {
        self.coord.k
    }

    pub fn tau(&self) -> f64 {
        self.coord.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionType {
    #[serde(alias = "C", alias = "c", alias = "Call")]
    Call,
    #[serde(alias = "P", alias = "p", alias = "Put")]
    Put,
}

/// One row of the quote CSV: a best bid/ask for a European option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuoteRecord {
    pub date: NaiveDate,
    pub expiry: NaiveDate,
    pub strike: f64,
    #[serde(rename = "type")]
    pub option_type: OptionType,
    pub bid: f64,
    pub ask: f64,
    pub forward: f64,
    pub discount_factor: f64,
}

impl RawQuoteRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ask >= self.bid
            && self.bid >= 0.0
            && self.strike > 0.0
            && self.forward > 0.0
            && self.discount_factor > 0.0
            && self.discount_factor <= 1.0
            && self.expiry > self.date;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid quote record {self:?}")))
        }
    }

    /// ACT/365 year fraction between trade date and expiry.
    pub fn tau(&self) -> f64 {
        (self.expiry - self.date).num_days() as f64 / 365.0
    }
}

/// Forward prices by time-to-expiry, sorted by tau.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardCurve(pub Vec<(f64, f64)>);

impl ForwardCurve {
    pub fn from_points(mut points: Vec<(f64, f64)>) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|a, b| a.0 == b.0);
        Self(points)
    }

    /// Forward at `tau`, linear in tau between nodes and flat outside.
    pub fn forward(&self, tau: f64) -> Option<f64> {
        let pts = &self.0;
        let first = pts.first()?;
        let last = pts.last()?;
        if tau <= first.0 {
            return Some(first.1);
        }
        if tau >= last.0 {
            return Some(last.1);
        }
        let i = pts.partition_point(|p| p.0 <= tau);
        let (t0, f0) = pts[i - 1];
        let (t1, f1) = pts[i];
        Some(f0 + (f1 - f0) * (tau - t0) / (t1 - t0))
    }
}

/// All quotes of one trading day plus the optional dense synthetic prior surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day_id: usize,
    pub date: NaiveDate,
    pub quotes: Vec<Quote>,
    /// Dense SABR-generated surface used as Stage-1 targets.
    pub synthetic_surface: Option<Vec<Quote>>,
    pub forward_curve: ForwardCurve,
    /// Noise-free generating surface, only known for synthetic markets.
    pub ground_truth: Option<Vec<Quote>>,
}

impl DayRecord {
    pub fn new(day_id: usize, date: NaiveDate, quotes: Vec<Quote>, forward_curve: ForwardCurve) -> Result<Self> {
        if quotes.is_empty() {
            return Err(Error::InsufficientQuotes { needed: 1, available: 0 });
        }
        Ok(Self {
            day_id,
            date,
            quotes,
            synthetic_surface: None,
            forward_curve,
            ground_truth: None,
        })
    }

    /// Distinct maturities present in the quotes, ascending.
    pub fn maturities(&self) -> Vec<f64> {
        distinct_taus(&self.quotes)
    }
}

pub fn distinct_taus(quotes: &[Quote]) -> Vec<f64> {
    let mut taus: Vec<f64> = quotes.iter().map(|q| q.tau()).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    taus
}

/// Where targets of a task come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    /// Targets are the day's real quotes not in the context.
    RealToReal,
    /// Targets are points of the dense synthetic surface.
    RealToSynthetic,
}

/// A context/target pair drawn from one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub context: Vec<Quote>,
    pub targets: Vec<Quote>,
    pub day_id: usize,
}

impl Task {
    pub fn target_coords(&self) -> Vec<Coordinate> {
        self.targets.iter().map(|q| q.coord).collect()
    }
}

/// Draw a task from `day`.
///
/// The day's quotes are shuffled once with `rng_seed`; the context is the first
/// `n_context` of that permutation, so for a fixed seed smaller contexts are
/// prefixes of larger ones. `n_target = None` takes every remaining real quote
/// (or the whole synthetic grid).
pub fn make_task(
    day: &DayRecord,
    n_context: usize,
    n_target: Option<usize>,
    source: TaskSource,
    rng_seed: u64,
) -> Result<Task> {
    let available = day.quotes.len();
    if n_context == 0 || available < n_context {
        return Err(Error::InsufficientQuotes { needed: n_context.max(1), available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..available).collect();
    order.shuffle(&mut rng);
    let context: Vec<Quote> = order[..n_context].iter().map(|&i| day.quotes[i]).collect();

    let targets = match source {
        TaskSource::RealToReal => {
            let remaining = &order[n_context..];
            let m = n_target.unwrap_or(remaining.len());
            if m == 0 || remaining.len() < m {
                return Err(Error::InsufficientQuotes { needed: n_context + m.max(1), available });
            }
            remaining[..m].iter().map(|&i| day.quotes[i]).collect()
        }
        TaskSource::RealToSynthetic => {
            let surface = day.synthetic_surface.as_deref().unwrap_or(&[]);
            let m = n_target.unwrap_or(surface.len());
            if m == 0 || surface.len() < m {
                return Err(Error::InsufficientQuotes { needed: m.max(1), available: surface.len() });
            }
            let mut grid: Vec<usize> = (0..surface.len()).collect();
            let (picked, _) = grid.partial_shuffle(&mut rng, m);
            picked.iter().map(|&i| surface[i]).collect()
        }
    };

    Ok(Task { context, targets, day_id: day.day_id })
}
