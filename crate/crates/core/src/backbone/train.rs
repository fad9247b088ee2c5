//! Adapter-only training and batched evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AdapterMode, FrozenTransformer};
use super::optim::{Optimizer, OptimizerKind};
use crate::data::DataRole;
use crate::error::{Error, Result};
use crate::exec::{pairwise_sum, Execution};
use crate::linalg::{Tape, Tensor, Var};

/// Windows per tape. Fixed so that reductions do not depend on thread count.
pub const CHUNK: usize = 8;

/// Supervision for one example.
#[derive(Clone, Copy, Debug)]
pub enum TargetRef<'a> {
    /// Row-major `horizon×d` values.
    Series(&'a [f64]),
    Class(usize),
}

/// A read-only collection of supervised examples.
pub trait Examples: Sync {
    fn len(&self) -> usize;
    /// Row-major `L×d` input window.
    fn input(&self, i: usize) -> &[f64];
    fn target(&self, i: usize) -> TargetRef<'_>;
    fn role(&self) -> DataRole;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Mse,
    Smape,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Validation loss before the first update.
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub updates: usize,
}

impl TrainingLog {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs
            .last()
            .and_then(|e| e.val_loss)
            .or(self.initial_val_loss)
    }
}

fn record_loss<'w>(
    tape: &mut Tape<'w>,
    output: Var,
    targets: &[TargetRef<'_>],
    kind: LossKind,
    denom: f64,
) -> Result<Var> {
    let out = tape.value(output);
    let width = out.cols();
    let rows = targets.len();
    match kind {
        LossKind::Mse | LossKind::Smape => {
            let mut t = Vec::with_capacity(rows * width);
            for tr in targets {
                match tr {
                    TargetRef::Series(v) if v.len() == width => t.extend_from_slice(v),
                    TargetRef::Series(v) => {
                        return Err(Error::dim("loss", &[v.len()], &[width]));
                    }
                    TargetRef::Class(_) => {
                        return Err(Error::Config("class target with a regression loss".into()));
                    }
                }
            }
            let t = tape.constant(Tensor::matrix(rows, width, t)?);
            let diff = tape.sub(output, t)?;
            if kind == LossKind::Mse {
                let sq = tape.mul(diff, diff)?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 1.0 / denom))
            } else {
                let num = tape.abs(diff);
                let a = tape.abs(output);
                let b = tape.abs(t);
                let den = tape.add(a, b)?;
                // Keeps both-zero terms at 0/tiny = 0.
                let den = tape.add_scalar(den, 1e-12);
                let ratio = tape.div(num, den)?;
                let s = tape.sum(ratio);
                Ok(tape.scale(s, 200.0 / denom))
            }
        }
        LossKind::CrossEntropy => {
            let mut onehot = vec![0.0; rows * width];
            for (i, tr) in targets.iter().enumerate() {
                match tr {
                    TargetRef::Class(c) if *c < width => onehot[i * width + c] = 1.0,
                    TargetRef::Class(c) => {
                        return Err(Error::Config(format!("class {c} out of range 0..{width}")));
                    }
                    TargetRef::Series(_) => {
                        return Err(Error::Config("series target with cross-entropy".into()));
                    }
                }
            }
            let oh = tape.constant(Tensor::matrix(rows, width, onehot)?);
            let ls = tape.log_softmax(output);
            let picked = tape.mul(ls, oh)?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0 / denom))
        }
    }
}

fn loss_denominator(kind: LossKind, rows: usize, width: usize) -> f64 {
    match kind {
        LossKind::CrossEntropy => rows as f64,
        _ => (rows * width) as f64,
    }
}

struct ChunkResult {
    loss: f64,
    grads: Vec<Tensor>,
}

fn chunk_grad(
    model: &FrozenTransformer,
    data: &dyn Examples,
    idx: &[usize],
    kind: LossKind,
    denom: f64,
) -> Result<ChunkResult> {
    let windows: Vec<&[f64]> = idx.iter().map(|&i| data.input(i)).collect();
    let targets: Vec<TargetRef> = idx.iter().map(|&i| data.target(i)).collect();
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, &windows, AdapterMode::Trainable)?;
    let loss = record_loss(&mut tape, rec.output, &targets, kind, denom)?;
    let mut g = tape.backward(loss)?;
    let f = rec.factors.expect("trainable mode records factors");
    let mut grads = Vec::with_capacity(4);
    for v in f.iter().flat_map(|fv| [fv.y, fv.x]) {
        grads.push(
            g.take(v)
                .ok_or_else(|| Error::Contract("adapter factor received no gradient".into()))?,
        );
    }
    Ok(ChunkResult {
        loss: tape.value(loss).data()[0],
        grads,
    })
}

/// Mean loss over `data` with the current adapters, without recording gradients.
pub fn evaluate_loss(
    model: &FrozenTransformer,
    data: &dyn Examples,
    kind: LossKind,
    exec: Execution,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Window("evaluation set is empty".into()));
    }
    let denom = loss_denominator(kind, data.len(), model.output_width());
    let chunks = index_chunks(&(0..data.len()).collect::<Vec<_>>());
    let parts = exec.map(&chunks, |idx| -> Result<f64> {
        let windows: Vec<&[f64]> = idx.iter().map(|&i| data.input(i)).collect();
        let targets: Vec<TargetRef> = idx.iter().map(|&i| data.target(i)).collect();
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &windows, AdapterMode::Frozen)?;
        let loss = record_loss(&mut tape, rec.output, &targets, kind, denom)?;
        Ok(tape.value(loss).data()[0])
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&parts))
}

/// Model outputs for every example, one row per example (`n×out`).
pub fn predict(model: &FrozenTransformer, data: &dyn Examples, exec: Execution) -> Result<Tensor> {
    let chunks = index_chunks(&(0..data.len()).collect::<Vec<_>>());
    let parts = exec.map(&chunks, |idx| {
        let windows: Vec<&[f64]> = idx.iter().map(|&i| data.input(i)).collect();
        model.forward_batch(&windows, AdapterMode::Frozen)
    });
    let width = model.output_width();
    let mut out = Vec::with_capacity(data.len() * width);
    for p in parts {
        out.extend(p?.into_data());
    }
    Tensor::matrix(data.len(), width, out)
}

fn index_chunks(idx: &[usize]) -> Vec<Vec<usize>> {
    idx.chunks(CHUNK).map(|c| c.to_vec()).collect()
}

/// Trains the adapter factors of `model` in place.
///
/// Training on data tagged [`DataRole::Target`] is refused.
pub fn train(
    model: &mut FrozenTransformer,
    train_set: &dyn Examples,
    val_set: Option<&dyn Examples>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainingLog> {
    if train_set.role() == DataRole::Target {
        return Err(Error::Contract(
            "gradient step requested on zero-shot target data".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(Error::Config(format!(
            "learning_rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::Window("training set is empty".into()));
    }
    let val_loss = |m: &FrozenTransformer| -> Result<Option<f64>> {
        val_set
            .filter(|v| !v.is_empty())
            .map(|v| evaluate_loss(m, v, cfg.loss, exec))
            .transpose()
    };

    let mut log = TrainingLog {
        initial_val_loss: val_loss(model)?,
        epochs: Vec::with_capacity(cfg.epochs),
        updates: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let width = model.output_width();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = Vec::new();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let denom = loss_denominator(cfg.loss, batch.len(), width);
            let chunks = index_chunks(batch);
            let shared: &FrozenTransformer = model;
            let parts = exec.map(&chunks, |idx| chunk_grad(shared, train_set, idx, cfg.loss, denom));
            let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
            let loss = pairwise_sum(&parts.iter().map(|p| p.loss).collect::<Vec<_>>());
            let mut grads = parts[0].grads.clone();
            for p in &parts[1..] {
                for (acc, g) in grads.iter_mut().zip(&p.grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {b} (loss {loss})"
                )));
            }
            {
                let [e, h] = model.adapters_mut();
                let (ey, ex) = e.adapter_mut().factors_mut();
                let (hy, hx) = h.adapter_mut().factors_mut();
                opt.step(&mut [ey, ex, hy, hx], &grads);
            }
            model.note_update();
            log.updates += 1;
            weighted.push(loss * batch.len() as f64);
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: pairwise_sum(&weighted) / train_set.len() as f64,
            val_loss: val_loss(model)?,
        });
    }
    Ok(log)
}
