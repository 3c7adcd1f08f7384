//! Shared fixtures for the criterion benchmarks in `benches/`.

use volnp_core::market::{generate_market, SyntheticMarketConfig};
use volnp_core::volnp::{ModelConfig, VolNp};
use volnp_core::DayRecord;

/// First day of the default synthetic market.
pub fn fixture_day() -> DayRecord {
    let cfg = SyntheticMarketConfig { n_days: 1, ..Default::default() };
    generate_market(&cfg).expect("synthetic market").remove(0)
}

/// A freshly initialised network at the default architecture.
pub fn fixture_model() -> VolNp {
    VolNp::new(ModelConfig::default(), 0).expect("default config is valid")
}
