//! Series ingestion, chronological splits, windowing and synthetic data.

mod collection;
mod manifest;
mod synth;
mod table;
mod windows;

use serde::{Deserialize, Serialize};

pub use collection::{
    load_collection, zero_shot_pair, CollectionWindows, SeriesCollection, ZeroShotPlan,
};
pub use manifest::{DatasetKind, DatasetManifest};
pub use manifest::SynthSource;
pub use synth::{synth, synth_collection, SynthKind, SynthParams};
pub use table::{load_csv, CsvSchema, Frequency, SeriesTable};
pub use windows::{make_windows, SplitSpec, Splits, WindowSet};

/// Where a set of examples may be used. Target data never receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataRole {
    Train,
    Validation,
    Test,
    /// Zero-shot evaluation data from another dataset.
    Target,
}
