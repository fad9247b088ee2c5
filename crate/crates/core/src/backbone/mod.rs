//! Frozen GPT-style backbone with the time-series front end.

pub mod checkpoint;
mod config;
mod model;
pub mod norm;
pub mod optim;
pub mod train;

pub use config::{HeadKind, ModelConfig};
pub use model::{effective_rank, AdapterMode, AdapterSpec, FrozenTransformer, Recorded, ADAPTER_NAMES};
pub use norm::{denormalize, patchify, unpatchify, zscore, NormStats};
