//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numeric code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let fp = f(&x);
            x[i] = x0 - h;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major `m×k · k×n` by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Direct-summation metric oracles, written from the textbook formulas.
pub mod metric_oracle {
    pub fn mse(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for n in 0..y.len() {
            s += (y[n] - p[n]) * (y[n] - p[n]);
        }
        s / y.len() as f64
    }

    pub fn mae(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for n in 0..y.len() {
            s += (y[n] - p[n]).abs();
        }
        s / y.len() as f64
    }

    pub fn smape(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for n in 0..y.len() {
            let den = (y[n].abs() + p[n].abs()) / 2.0;
            if den != 0.0 {
                s += (y[n] - p[n]).abs() / den;
            }
        }
        100.0 / y.len() as f64 * s
    }

    /// `None` when the seasonal-naive scale is zero.
    pub fn mase(y: &[f64], p: &[f64], insample: &[f64], m: usize) -> Option<f64> {
        let n = insample.len();
        let mut den = 0.0;
        for t in m..n {
            den += (insample[t] - insample[t - m]).abs();
        }
        den /= (n - m) as f64;
        if den == 0.0 {
            return None;
        }
        let mut num = 0.0;
        for t in 0..y.len() {
            num += (y[t] - p[t]).abs();
        }
        Some(num / y.len() as f64 / den)
    }

    pub fn owa(y: &[f64], model: &[f64], naive: &[f64], insample: &[f64], m: usize) -> Option<f64> {
        let sn = smape(y, naive);
        let mn = mase(y, naive, insample, m)?;
        let mm = mase(y, model, insample, m)?;
        if sn == 0.0 || mn == 0.0 {
            return None;
        }
        Some(0.5 * (smape(y, model) / sn + mm / mn))
    }

    /// `(accuracy, precision, recall, f1)`, `None` where a denominator is zero.
    pub fn classification(tp: u64, fp: u64, tn: u64, fn_: u64) -> [Option<f64>; 4] {
        let f = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
        let acc = f(tp + tn, tp + fp + tn + fn_);
        let p = f(tp, tp + fp);
        let r = f(tp, tp + fn_);
        let f1 = match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * (p * r) / (p + r)),
            _ => None,
        };
        [acc, p, r, f1]
    }
}

/// Spec and dataset builders. These use library types but compute nothing
/// that a test compares against.
pub mod fixtures {
    use std::path::Path;

    use rslora_ts::backbone::optim::OptimizerKind;
    use rslora_ts::backbone::train::{LossKind, TrainConfig};
    use rslora_ts::backbone::ModelConfig;
    use rslora_ts::data::{
        synth_collection, DatasetKind, DatasetManifest, Frequency, SplitSpec, SynthKind,
        SynthParams, SynthSource,
    };
    use rslora_ts::harness::{ExperimentSpec, ZeroShotSpec};

    pub fn synth_manifest(name: &str, length: usize, n_vars: usize, seed: u64) -> DatasetManifest {
        DatasetManifest {
            name: name.into(),
            frequency: Frequency::Hourly,
            kind: DatasetKind::Table,
            path: None,
            synth: Some(SynthSource {
                kind: SynthKind::MultiSine,
                length,
                seed,
                params: SynthParams::default(),
            }),
            n_vars,
            has_header: false,
            timestamp_column: None,
            id_column: false,
            split: SplitSpec::default(),
        }
    }

    /// A model small enough for sub-second training.
    pub fn tiny_model(n_vars: usize) -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden_dim: 8,
            patch_size: 4,
            input_length: 16,
            label_length: 0,
            horizon: 8,
            n_vars,
            head: Default::default(),
            n_classes: 0,
            ffn_mult: 2,
            backbone_seed: 3,
        }
    }

    pub fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            name: "tiny".into(),
            dataset_manifest: None,
            dataset: Some(synth_manifest("tiny-sines", 300, 2, 1)),
            model: tiny_model(2),
            horizons: Vec::new(),
            ranks: vec![2, 4],
            alpha: 1.0,
            sigma_x: 0.02,
            train: TrainConfig {
                loss: LossKind::Mse,
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.01,
                batch_size: 16,
                epochs: 2,
                seed: 0,
            },
            seeds: vec![0],
            stride: 2,
            few_shot: None,
            saturation_tolerance: 0.05,
            stability: None,
            zero_shot: None,
            output_dir: None,
        }
    }

    fn collection_manifest(dir: &Path, name: &str, f: Frequency, n: usize, seed: u64) -> DatasetManifest {
        let (lo, hi) = match f {
            Frequency::Yearly => (20, 40),
            Frequency::Quarterly => (30, 60),
            _ => (60, 120),
        };
        let c = synth_collection(name, f, n, (lo, hi), seed);
        let path = dir.join(format!("{name}.csv"));
        c.write_csv(&path).unwrap();
        DatasetManifest {
            name: name.into(),
            frequency: f,
            kind: DatasetKind::Collection,
            path: Some(path),
            synth: None,
            n_vars: 1,
            has_header: true,
            timestamp_column: None,
            id_column: true,
            split: SplitSpec::default(),
        }
    }

    /// M3-like sources and M4-like targets for yearly, quarterly and monthly.
    pub fn zero_shot_spec(dir: &Path, n_series: usize) -> ExperimentSpec {
        let freqs = [Frequency::Yearly, Frequency::Quarterly, Frequency::Monthly];
        let sources = freqs
            .iter()
            .enumerate()
            .map(|(i, &f)| collection_manifest(dir, &format!("m3-{f}"), f, n_series, i as u64))
            .collect();
        let targets = freqs
            .iter()
            .enumerate()
            .map(|(i, &f)| collection_manifest(dir, &format!("m4-{f}"), f, n_series, 100 + i as u64))
            .collect();
        let mut spec = tiny_spec();
        spec.name = "zero-shot".into();
        spec.dataset = None;
        spec.model = ModelConfig {
            patch_size: 2,
            ..tiny_model(1)
        };
        spec.train.loss = LossKind::Smape;
        spec.zero_shot = Some(ZeroShotSpec {
            sources,
            targets,
            frequencies: freqs.to_vec(),
            lookback: 2,
        });
        spec
    }
}
