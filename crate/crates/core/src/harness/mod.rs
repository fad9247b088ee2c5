//! Experiment specs, commands and their on-disk outputs.

mod commands;
mod record;
mod spec;

pub use commands::{
    cmd_eval, cmd_params, cmd_rank_sweep, cmd_stability, cmd_synth, cmd_train, cmd_zero_shot,
    fit, forecast_report, load_standardized, prepare, saturation_rank, PreparedData, RunContext,
    SweepReport, ADAPTERS_FILE, METRICS_FILE, RECORD_FILE,
};
pub use record::{write_json, HorizonRun, RunRecord, SeedRun, SweepRow, ZeroShotRow};
pub use spec::{ExperimentSpec, ZeroShotSpec};
