//! Rank-stabilized low-rank adapters (β = α/√r) on a frozen GPT-style
//! backbone for time-series forecasting and classification, with the data,
//! metric, accounting and experiment machinery around them.

pub mod accounting;
pub mod backbone;
pub mod data;
pub mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod rslora;

pub use error::{Error, Result};
