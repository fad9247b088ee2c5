use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accounting::ParamBudget;
use crate::backbone::train::TrainingLog;
use crate::error::Result;
use crate::metrics::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub training: TrainingLog,
    /// Test metrics of the untrained (zero-adapter) model.
    pub baseline: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRun {
    pub horizon: usize,
    pub rank: usize,
    pub budget: ParamBudget,
    pub seeds: Vec<SeedRun>,
    /// Arithmetic mean over seeds.
    pub mean: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub name: String,
    pub spec_hash: String,
    pub horizons: Vec<HorizonRun>,
    /// The only field allowed to differ between identical runs.
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub horizon: usize,
    pub rank: usize,
    pub trainable: Option<usize>,
    #[serde(rename = "trainable_M")]
    pub trainable_m: Option<f64>,
    pub mem_mib: Option<f64>,
    /// Validation loss of the untrained adapters.
    pub baseline_val_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub saturation: bool,
    pub error: Option<String>,
}

impl SweepRow {
    pub(crate) fn empty(horizon: usize, rank: usize) -> Self {
        SweepRow {
            horizon,
            rank,
            trainable: None,
            trainable_m: None,
            mem_mib: None,
            baseline_val_mse: None,
            val_mse: None,
            mse: None,
            mae: None,
            saturation: false,
            error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub frequency: String,
    pub horizon: usize,
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub series: usize,
    pub skipped: usize,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
}

impl ZeroShotRow {
    pub(crate) fn average(smape: Option<f64>) -> Self {
        ZeroShotRow {
            frequency: "average".into(),
            horizon: 0,
            seed: 0,
            source: String::new(),
            target: String::new(),
            series: 0,
            skipped: 0,
            smape,
            mase: None,
            owa: None,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
