//! Implied volatility surface construction from sparse option quotes.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: quotes, day records and meta-learning task sampling.
//! - [`blackvol`]: Black-76 pricing and implied-volatility inversion.
//! - [`sabr`], [`ssvi`], [`gp`]: classical surface models used as priors and baselines.
//! - [`tensor`]: a small reverse-mode autodiff engine over dense matrices.
//! - [`volnp`]: the attentive neural process (encoder, decoder, Gaussian head).
//! - [`train`]: AdamW and the two-stage pre-train / fine-tune curriculum.
//! - [`market`]: quote CSV ingestion and a seeded synthetic market.
//! - [`arbitrage`]: Durrleman butterfly diagnostics.
//! - [`eval`]: paired evaluation in basis points, sparsity sweeps and heatmaps.

pub mod arbitrage;
pub mod blackvol;
pub mod error;
pub mod eval;
pub mod gp;
pub mod market;
pub mod optim;
pub mod sabr;
pub mod ssvi;
pub mod tensor;
pub mod train;
pub mod types;
pub mod volnp;

pub use error::{Error, Result};
pub use types::{make_task, Coordinate, DayRecord, OptionType, Quote, RawQuoteRecord, Task, TaskSource};
