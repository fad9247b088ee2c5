use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::record::{write_json, HorizonRun, RunRecord, SeedRun, SweepRow, ZeroShotRow};
use super::spec::ExperimentSpec;
use crate::accounting::{count_params, write_budget_csv, BudgetRow};
use crate::backbone::checkpoint::{read_checkpoint, write_checkpoint};
use crate::backbone::train::{predict, train, Examples, TrainingLog};
use crate::backbone::{AdapterSpec, FrozenTransformer, ModelConfig};
use crate::data::{
    make_windows, zero_shot_pair, CollectionWindows, DataRole, DatasetManifest, SeriesTable,
    WindowSet,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{mae, mase_scaled, mean_defined, mse, owa, seasonal_naive, smape, MetricReport, MetricValue};
use crate::rslora::stability::{stability_experiment, StabilityReport, StabilizationConfig};

/// Where a command writes and how it schedules work.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub out: PathBuf,
    pub exec: Execution,
}

impl RunContext {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunContext {
            out: out.into(),
            exec: Execution::default(),
        }
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ADAPTERS_FILE: &str = "adapters.ckpt";

/// Dataset standardized with its training-segment statistics.
pub fn load_standardized(manifest: &DatasetManifest) -> Result<SeriesTable> {
    let table = manifest.load_table()?;
    let (train_end, _) = manifest.split.bounds(table.len())?;
    let stats = table.stats(train_end.max(2))?;
    table.standardized(&stats)
}

pub struct PreparedData {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

pub fn prepare(spec: &ExperimentSpec, table: &SeriesTable, horizon: usize) -> Result<PreparedData> {
    let manifest = spec.require_dataset()?;
    let l = spec.model.input_length;
    let strided = make_windows(table, l, horizon, &manifest.split, spec.stride)?;
    let dense = make_windows(table, l, horizon, &manifest.split, 1)?;
    let train = match spec.few_shot {
        Some(f) => strided.train.few_shot(f)?,
        None => strided.train,
    };
    Ok(PreparedData {
        train,
        val: dense.val,
        test: dense.test,
    })
}

fn adapter_spec(spec: &ExperimentSpec, rank: usize, seed: u64) -> AdapterSpec {
    AdapterSpec {
        rank,
        alpha: spec.alpha,
        sigma_x: spec.sigma_x,
        seed,
    }
}

/// Builds a fresh model and trains it; returns it with its log.
pub fn fit(
    spec: &ExperimentSpec,
    cfg: &ModelConfig,
    rank: usize,
    seed: u64,
    train_set: &dyn Examples,
    val_set: Option<&dyn Examples>,
    exec: Execution,
) -> Result<(FrozenTransformer, TrainingLog)> {
    let mut model = FrozenTransformer::new(cfg.clone(), adapter_spec(spec, rank, seed))?;
    let checksum = model.frozen_checksum();
    let mut tc = spec.train.clone();
    tc.seed = seed;
    let log = train(&mut model, train_set, val_set, &tc, exec)?;
    if model.frozen_checksum() != checksum {
        return Err(Error::Contract("frozen weights changed during training".into()));
    }
    Ok((model, log))
}

/// MSE, MAE and sMAPE of `model` over every target value of `data`.
pub fn forecast_report(model: &FrozenTransformer, data: &WindowSet, exec: Execution) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Window("no evaluation windows".into()));
    }
    let pred = predict(model, data, exec)?;
    let truth: Vec<f64> = (0..data.len())
        .flat_map(|i| data.target_slice(i).iter().copied())
        .collect();
    let mut r = MetricReport::default();
    r.insert_value("mse", mse(&truth, pred.data())?);
    r.insert_value("mae", mae(&truth, pred.data())?);
    r.insert_value("smape", smape(&truth, pred.data())?);
    Ok(r)
}

fn mean_report(reports: &[&MetricReport]) -> MetricReport {
    let mut out = MetricReport::default();
    if let Some(first) = reports.first() {
        out.seasonal_period = first.seasonal_period;
        out.naive_baseline = first.naive_baseline.clone();
        for k in first.values.keys() {
            let vals: Vec<MetricValue> = reports
                .iter()
                .filter_map(|r| r.values.get(k).cloned())
                .collect();
            out.insert(k, mean_defined(&vals));
        }
    }
    out
}

fn metric_cell(v: &MetricValue) -> String {
    match v {
        MetricValue::Value(x) => x.to_string(),
        MetricValue::Undefined(_) => "undefined".into(),
    }
}

fn write_metrics_csv(path: &Path, horizons: &[HorizonRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "rank", "seed", "metric", "value"])?;
    for h in horizons {
        let rows = h
            .seeds
            .iter()
            .map(|s| (s.seed.to_string(), &s.test))
            .chain(std::iter::once(("mean".to_string(), &h.mean)));
        for (seed, rep) in rows {
            for (k, v) in &rep.values {
                w.write_record([
                    h.horizon.to_string(),
                    h.rank.to_string(),
                    seed.clone(),
                    k.clone(),
                    metric_cell(v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Checkpoint config: what is needed to rebuild the models.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    spec_hash: String,
    rank: usize,
    alpha: f64,
    sigma_x: f64,
    models: Vec<ModelConfig>,
    seeds: Vec<u64>,
}

fn tensor_prefix(horizon: usize, seed: u64) -> String {
    format!("h{horizon}/seed{seed}/")
}

/// Trains `ranks[0]` once per seed and horizon; writes the record, metrics
/// and adapter-only checkpoint.
pub fn cmd_train(spec: &ExperimentSpec, ctx: &RunContext) -> Result<RunRecord> {
    spec.validate()?;
    let start = Instant::now();
    let table = load_standardized(spec.require_dataset()?)?;
    let rank = spec.ranks[0];
    let mut horizons = Vec::new();
    let mut models = Vec::new();
    for h in spec.horizons() {
        let cfg = spec.model_for(h);
        let data = prepare(spec, &table, h)?;
        let runs = ctx.exec.map(&spec.seeds, |&seed| -> Result<(SeedRun, FrozenTransformer)> {
            let fresh = FrozenTransformer::new(cfg.clone(), adapter_spec(spec, rank, seed))?;
            let baseline = forecast_report(&fresh, &data.test, ctx.exec)?;
            let val: Option<&dyn Examples> = (!data.val.is_empty()).then_some(&data.val as &dyn Examples);
            let (model, log) = fit(spec, &cfg, rank, seed, &data.train, val, ctx.exec)?;
            let test = forecast_report(&model, &data.test, ctx.exec)?;
            Ok((
                SeedRun {
                    seed,
                    training: log,
                    baseline,
                    test,
                },
                model,
            ))
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        let budget = count_params(&runs[0].1)?;
        let mean = mean_report(&runs.iter().map(|(s, _)| &s.test).collect::<Vec<_>>());
        let (seeds, ms): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        models.push((h, ms));
        horizons.push(HorizonRun {
            horizon: h,
            rank,
            budget,
            seeds,
            mean,
        });
    }

    let hash = spec.hash()?;
    let ck_cfg = CheckpointConfig {
        spec_hash: hash.clone(),
        rank,
        alpha: spec.alpha,
        sigma_x: spec.sigma_x,
        models: spec.horizons().iter().map(|&h| spec.model_for(h)).collect(),
        seeds: spec.seeds.clone(),
    };
    let mut tensors = Vec::new();
    for (h, ms) in &models {
        for (seed, m) in spec.seeds.iter().zip(ms) {
            let p = tensor_prefix(*h, *seed);
            tensors.extend(m.adapter_tensors().into_iter().map(|(n, t)| (format!("{p}{n}"), t)));
        }
    }
    let file = fs::File::create(ctx.path(ADAPTERS_FILE)?)?;
    write_checkpoint(
        std::io::BufWriter::new(file),
        &serde_json::to_value(&ck_cfg)?,
        &tensors,
    )?;

    write_metrics_csv(&ctx.path(METRICS_FILE)?, &horizons)?;
    let record = RunRecord {
        command: "train".into(),
        name: spec.name.clone(),
        spec_hash: hash,
        horizons,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&ctx.path(RECORD_FILE)?, &record)?;
    Ok(record)
}

/// Re-evaluates the adapters saved by `train` in `ctx.out`.
pub fn cmd_eval(spec: &ExperimentSpec, ctx: &RunContext) -> Result<RunRecord> {
    spec.validate()?;
    let start = Instant::now();
    let ck = read_checkpoint(std::io::BufReader::new(fs::File::open(
        ctx.out.join(ADAPTERS_FILE),
    )?))?;
    let cfg: CheckpointConfig = serde_json::from_value(ck.config.clone())?;
    let table = load_standardized(spec.require_dataset()?)?;
    let mut horizons = Vec::new();
    for h in spec.horizons() {
        let model_cfg = spec.model_for(h);
        if !cfg.models.contains(&model_cfg) {
            return Err(Error::Checkpoint(format!(
                "checkpoint has no model matching the spec at horizon {h}"
            )));
        }
        let data = prepare(spec, &table, h)?;
        let mut seeds = Vec::new();
        for &seed in &cfg.seeds {
            let mut model = FrozenTransformer::new(
                model_cfg.clone(),
                AdapterSpec {
                    rank: cfg.rank,
                    alpha: cfg.alpha,
                    sigma_x: cfg.sigma_x,
                    seed,
                },
            )?;
            let baseline = forecast_report(&model, &data.test, ctx.exec)?;
            let p = tensor_prefix(h, seed);
            let tensors: Vec<_> = ck
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
                .collect();
            model.load_adapter_tensors(&tensors)?;
            let test = forecast_report(&model, &data.test, ctx.exec)?;
            seeds.push(SeedRun {
                seed,
                training: TrainingLog {
                    initial_val_loss: None,
                    epochs: Vec::new(),
                    updates: 0,
                },
                baseline,
                test,
            });
        }
        let mean = mean_report(&seeds.iter().map(|s| &s.test).collect::<Vec<_>>());
        let model = FrozenTransformer::new(model_cfg, adapter_spec(spec, cfg.rank, 0))?;
        horizons.push(HorizonRun {
            horizon: h,
            rank: cfg.rank,
            budget: count_params(&model)?,
            seeds,
            mean,
        });
    }
    write_metrics_csv(&ctx.path("eval_metrics.csv")?, &horizons)?;
    let record = RunRecord {
        command: "eval".into(),
        name: spec.name.clone(),
        spec_hash: spec.hash()?,
        horizons,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&ctx.path("eval.json")?, &record)?;
    Ok(record)
}

/// Smallest rank whose MSE is within `tol` (relative) of the best.
pub fn saturation_rank(results: &[(usize, f64)], tol: f64) -> Option<usize> {
    let best = results
        .iter()
        .map(|r| r.1)
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    results
        .iter()
        .filter(|(_, m)| m.is_finite() && *m <= best * (1.0 + tol))
        .map(|r| r.0)
        .min()
}

/// Output of [`cmd_rank_sweep`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub spec_hash: String,
    pub rows: Vec<SweepRow>,
    /// Saturation rank per horizon.
    pub saturation: Vec<(usize, Option<usize>)>,
    pub wall_clock_secs: f64,
}

struct SweepCell {
    baseline_val: f64,
    val: f64,
    test: MetricReport,
    budget: crate::accounting::ParamBudget,
}

/// One train/eval per (horizon, rank, seed); failures are recorded per row.
pub fn cmd_rank_sweep(spec: &ExperimentSpec, ctx: &RunContext) -> Result<SweepReport> {
    spec.validate()?;
    let start = Instant::now();
    let table = load_standardized(spec.require_dataset()?)?;
    let mut rows = Vec::new();
    let mut saturation = Vec::new();
    for h in spec.horizons() {
        let cfg = spec.model_for(h);
        let data = prepare(spec, &table, h)?;
        let jobs: Vec<(usize, u64)> = spec
            .ranks
            .iter()
            .flat_map(|&r| spec.seeds.iter().map(move |&s| (r, s)))
            .collect();
        let results = ctx.exec.map(&jobs, |&(rank, seed)| -> Result<SweepCell> {
            let val: Option<&dyn Examples> = (!data.val.is_empty()).then_some(&data.val as &dyn Examples);
            let (model, log) = fit(spec, &cfg, rank, seed, &data.train, val, ctx.exec)?;
            Ok(SweepCell {
                baseline_val: log.initial_val_loss.unwrap_or(f64::NAN),
                val: log.final_val_loss().unwrap_or(f64::NAN),
                test: forecast_report(&model, &data.test, ctx.exec)?,
                budget: count_params(&model)?,
            })
        });
        let mut per_rank = Vec::new();
        for (k, &rank) in spec.ranks.iter().enumerate() {
            let n = spec.seeds.len();
            let chunk = &results[k * n..(k + 1) * n];
            let mut row = SweepRow::empty(h, rank);
            if let Some(Err(e)) = chunk.iter().find(|r| r.is_err()) {
                row.error = Some(e.to_string());
            } else {
                let ok: Vec<_> = chunk.iter().map(|r| r.as_ref().unwrap()).collect();
                let mean = |f: &dyn Fn(&SweepCell) -> f64| ok.iter().map(|c| f(c)).sum::<f64>() / n as f64;
                row.baseline_val_mse = Some(mean(&|c| c.baseline_val));
                row.val_mse = Some(mean(&|c| c.val));
                row.mse = Some(mean(&|c| c.test.get("mse").unwrap_or(f64::NAN)));
                row.mae = Some(mean(&|c| c.test.get("mae").unwrap_or(f64::NAN)));
                let b = &ok[0].budget;
                row.trainable = Some(b.trainable);
                row.trainable_m = Some(b.trainable_millions());
                row.mem_mib = Some(b.checkpoint_mib);
                per_rank.push((rank, row.mse.unwrap()));
            }
            rows.push(row);
        }
        let sat = saturation_rank(&per_rank, spec.saturation_tolerance);
        for r in rows.iter_mut().filter(|r| r.horizon == h) {
            r.saturation = Some(r.rank) == sat;
        }
        saturation.push((h, sat));
    }
    let mut w = csv::Writer::from_path(ctx.path("rank_sweep.csv")?)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let report = SweepReport {
        spec_hash: spec.hash()?,
        rows,
        saturation,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&ctx.path("rank_sweep.json")?, &report)?;
    Ok(report)
}

/// Runs the moment-scaling experiment and writes its CSV and summary.
pub fn cmd_stability(cfg: &StabilizationConfig, ctx: &RunContext) -> Result<StabilityReport> {
    let report = stability_experiment(cfg, ctx.exec)?;
    let f = fs::File::create(ctx.path("stability.csv")?)?;
    report.write_csv(std::io::BufWriter::new(f))?;
    write_json(&ctx.path("stability.json")?, &report.summary)?;
    Ok(report)
}

/// Trains on each source collection and evaluates on the paired target with
/// no gradient updates.
pub fn cmd_zero_shot(spec: &ExperimentSpec, ctx: &RunContext) -> Result<Vec<ZeroShotRow>> {
    spec.validate()?;
    let z = spec
        .zero_shot
        .as_ref()
        .ok_or_else(|| Error::Validation(vec!["spec has no [zero_shot] section".into()]))?;
    let sources = z
        .sources
        .iter()
        .map(DatasetManifest::load_collection)
        .collect::<Result<Vec<_>>>()?;
    let targets = z
        .targets
        .iter()
        .map(DatasetManifest::load_collection)
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &freq in &z.frequencies {
        let plan = zero_shot_pair(&sources, &targets, freq)?;
        let src = sources.iter().find(|c| c.name == plan.source).expect("paired");
        let tgt = targets.iter().find(|c| c.name == plan.target).expect("paired");
        let (h, m) = (plan.horizon, plan.seasonal_period);
        let l = z.lookback * h;
        let cfg = ModelConfig {
            input_length: l,
            horizon: h,
            n_vars: 1,
            ..spec.model.clone()
        };
        cfg.validate()?;
        let train_set = CollectionWindows::training(src, l, h, spec.stride);
        let eval_set = CollectionWindows::final_horizon(tgt, l, h, DataRole::Target);
        if eval_set.is_empty() {
            return Err(Error::Window(format!("no {freq} target series of length ≥ {}", l + h)));
        }
        let rank = spec.ranks[0].min(ExperimentSpec::max_rank(&cfg));
        for &seed in &spec.seeds {
            let (model, _) = fit(spec, &cfg, rank, seed, &train_set, None, ctx.exec)?;
            let updates = model.update_count();
            let pred = predict(&model, &eval_set, ctx.exec)?;
            if model.update_count() != updates {
                return Err(Error::Contract("adapter update during zero-shot evaluation".into()));
            }
            let (mut sm, mut ms, mut ow) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..eval_set.len() {
                let (y, p, hist) = (eval_set.target_slice(i), pred.row(i), eval_set.history(i));
                sm.push(MetricValue::Value(smape(y, p)?));
                if hist.len() > m {
                    let naive = seasonal_naive(hist, h, m)?;
                    ms.push(mase_scaled(y, p, hist, m)?);
                    ow.push(owa(y, p, &naive, hist, m)?);
                }
            }
            rows.push(ZeroShotRow {
                frequency: freq.to_string(),
                horizon: h,
                seed,
                source: plan.source.clone(),
                target: plan.target.clone(),
                series: eval_set.len(),
                skipped: eval_set.skipped,
                smape: mean_defined(&sm).value(),
                mase: mean_defined(&ms).value(),
                owa: mean_defined(&ow).value(),
            });
        }
    }
    let avg: Vec<f64> = rows.iter().filter_map(|r| r.smape).collect();
    let mut w = csv::Writer::from_path(ctx.path("zero_shot.csv")?)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.serialize(ZeroShotRow::average(
        (!avg.is_empty()).then(|| avg.iter().sum::<f64>() / avg.len() as f64),
    ))?;
    w.flush()?;
    write_json(&ctx.path("zero_shot.json")?, &rows)?;
    Ok(rows)
}

/// Parameter table per horizon and rank, from constructed (untrained) models.
pub fn cmd_params(spec: &ExperimentSpec, ctx: &RunContext) -> Result<Vec<BudgetRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for h in spec.horizons() {
        for &r in &spec.ranks {
            let model = FrozenTransformer::new(spec.model_for(h), adapter_spec(spec, r, 0))?;
            rows.push(BudgetRow::new(h, r, &count_params(&model)?));
        }
    }
    write_budget_csv(&rows, fs::File::create(ctx.path("params.csv")?)?)?;
    Ok(rows)
}

/// Writes a synthetic table as CSV plus a manifest that loads it.
pub fn cmd_synth(manifest: &DatasetManifest, ctx: &RunContext) -> Result<PathBuf> {
    let table = manifest.load_table()?;
    let csv_path = ctx.path(&format!("{}.csv", manifest.name))?;
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record((0..table.n_vars()).map(|j| format!("v{j}")))?;
    for row in table.values().chunks(table.n_vars()) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    let out = DatasetManifest {
        path: Some(PathBuf::from(format!("{}.csv", manifest.name))),
        synth: None,
        has_header: true,
        timestamp_column: None,
        ..manifest.clone()
    };
    let toml_path = ctx.path(&format!("{}.toml", manifest.name))?;
    fs::write(
        &toml_path,
        toml::to_string(&out).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(toml_path)
}
