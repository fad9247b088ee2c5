//! Trainable-parameter counts, percentages and checkpoint sizes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::checkpoint::write_checkpoint;
use crate::backbone::{effective_rank, FrozenTransformer, ModelConfig};
use crate::error::{Error, Result};

pub const BYTES_PER_PARAM: usize = 4;
const MIB: f64 = (1u64 << 20) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable: usize,
    pub total: usize,
    pub percent: f64,
    /// Raw f32 adapter bytes in MiB.
    pub checkpoint_mib: f64,
    /// Size of the written adapter container, header included.
    pub container_mib: Option<f64>,
}

impl ParamBudget {
    fn new(trainable: usize, total: usize, container_bytes: Option<u64>) -> Self {
        ParamBudget {
            trainable,
            total,
            percent: 100.0 * trainable as f64 / total as f64,
            checkpoint_mib: checkpoint_mib(trainable),
            container_mib: container_bytes.map(|b| b as f64 / MIB),
        }
    }

    pub fn trainable_millions(&self) -> f64 {
        self.trainable as f64 / 1e6
    }
}

pub fn checkpoint_mib(params: usize) -> f64 {
    (params * BYTES_PER_PARAM) as f64 / MIB
}

/// Counts by enumerating the model's tensors and serializing its adapters.
pub fn count_params(model: &FrozenTransformer) -> Result<ParamBudget> {
    let trainable: usize = model.adapter_tensors().iter().map(|(_, t)| t.numel()).sum();
    let total = trainable + model.frozen_count();
    let cfg = serde_json::to_value(model.adapter_spec())?;
    let size = write_checkpoint(std::io::sink(), &cfg, &model.adapter_tensors())?;
    Ok(ParamBudget::new(trainable, total, Some(size.total_bytes)))
}

/// Adapter dimensions `(d_out, d_in)` of the embedding and head.
pub fn adapter_dims(cfg: &ModelConfig) -> [(usize, usize); 2] {
    [
        (cfg.hidden_dim, cfg.patch_width()),
        (cfg.head_out(), cfg.head_in()),
    ]
}

/// Trainable count implied by the configuration alone: `Σ r(d + d′)`.
pub fn trainable_for(cfg: &ModelConfig, rank: usize) -> usize {
    adapter_dims(cfg)
        .iter()
        .map(|&(o, i)| effective_rank(rank, o, i) * (o + i))
        .sum()
}

/// Frozen count implied by the configuration alone.
pub fn frozen_for(cfg: &ModelConfig) -> usize {
    let d = cfg.hidden_dim;
    let ffn = cfg.ffn_mult * d;
    let block = 4 * d * d + 2 * d * ffn + 4 * d;
    let [(eo, ei), (ho, hi)] = adapter_dims(cfg);
    eo * ei + cfg.layers * block + 2 * d + ho * hi
}

/// Budget from the configuration without building weights.
pub fn budget_for(cfg: &ModelConfig, rank: usize) -> ParamBudget {
    let t = trainable_for(cfg, rank);
    ParamBudget::new(t, t + frozen_for(cfg), None)
}

/// `(1 / metric) / (trainable in millions)`.
pub fn efficiency_score(trainable_millions: f64, metric: f64) -> Result<f64> {
    if !(metric > 0.0) || !(trainable_millions > 0.0) {
        return Err(Error::Domain(format!(
            "efficiency needs positive metric and parameters, got {metric} and {trainable_millions}"
        )));
    }
    Ok((1.0 / metric) / trainable_millions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub horizon: usize,
    pub rank: usize,
    #[serde(rename = "trainable_M")]
    pub trainable_m: f64,
    pub percent_all: f64,
    pub mem_mib: f64,
}

impl BudgetRow {
    pub fn new(horizon: usize, rank: usize, b: &ParamBudget) -> Self {
        BudgetRow {
            horizon,
            rank,
            trainable_m: b.trainable_millions(),
            percent_all: b.percent,
            mem_mib: b.checkpoint_mib,
        }
    }
}

pub fn write_budget_csv<W: Write>(rows: &[BudgetRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
