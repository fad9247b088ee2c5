//! Deterministic synthetic series for desk-scale experiments.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Frequency, SeriesCollection, SeriesTable};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    MultiSine,
    TrendSeasonNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub amplitudes: Vec<f64>,
    /// Periods in time steps, one per amplitude.
    pub periods: Vec<f64>,
    pub noise_std: f64,
    /// Standard deviation of the per-variable slope over the whole series.
    pub trend_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            amplitudes: vec![1.0, 0.5, 0.25],
            periods: vec![24.0, 48.0, 96.0],
            noise_std: 0.1,
            trend_std: 1.0,
        }
    }
}

impl SynthParams {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.amplitudes.len() != self.periods.len() {
            p.push("synth amplitudes and periods differ in length".into());
        }
        if self.periods.iter().any(|&q| !(q > 0.0)) {
            p.push("synth periods must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            p.push("synth noise_std must be non-negative".into());
        }
        p
    }
}

/// Multi-sine: variable `j` is `Σₖ aₖ sin(2π t / pₖ + φⱼₖ) + σ·N(0,1)` with
/// phases uniform on `[0, 2π)`. Trend-season-noise adds a random linear
/// trend to the first sine component only.
pub fn synth(
    kind: SynthKind,
    length: usize,
    n_vars: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<SeriesTable> {
    let p = params.problems();
    if !p.is_empty() {
        return Err(Error::Config(p.join("; ")));
    }
    if length == 0 || n_vars == 0 {
        return Err(Error::Domain("synth needs T ≥ 1 and d ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps = match kind {
        SynthKind::MultiSine => params.amplitudes.len(),
        SynthKind::TrendSeasonNoise => params.amplitudes.len().min(1),
    };
    let phases: Vec<Vec<f64>> = (0..n_vars)
        .map(|_| (0..comps).map(|_| rng.random_range(0.0..TAU)).collect())
        .collect();
    let slopes: Vec<f64> = match kind {
        SynthKind::MultiSine => vec![0.0; n_vars],
        SynthKind::TrendSeasonNoise => (0..n_vars)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                params.trend_std * e
            })
            .collect(),
    };
    let mut values = Vec::with_capacity(length * n_vars);
    for t in 0..length {
        let tf = t as f64;
        for j in 0..n_vars {
            let mut v = slopes[j] * tf / length as f64;
            for k in 0..comps {
                v += params.amplitudes[k] * (TAU * tf / params.periods[k] + phases[j][k]).sin();
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            values.push(v + params.noise_std * e);
        }
    }
    let name = match kind {
        SynthKind::MultiSine => "multi-sine",
        SynthKind::TrendSeasonNoise => "trend-season-noise",
    };
    SeriesTable::new(name, Frequency::Hourly, n_vars, values)
}

/// Positive-level seasonal series of random length, one collection per call.
pub fn synth_collection(
    name: &str,
    frequency: Frequency,
    n_series: usize,
    lengths: (usize, usize),
    seed: u64,
) -> SeriesCollection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = frequency.seasonal_period() as f64;
    let series = (0..n_series)
        .map(|_| {
            let len = rng.random_range(lengths.0..=lengths.1);
            let level = rng.random_range(50.0..500.0);
            let slope = rng.random_range(-0.01..0.03) * level;
            let amp = if m > 1.0 { rng.random_range(0.0..0.15) * level } else { 0.0 };
            let phase = rng.random_range(0.0..TAU);
            (0..len)
                .map(|t| {
                    let tf = t as f64;
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (level + slope * tf + amp * (TAU * tf / m + phase).sin() + 0.02 * level * e)
                        .max(1.0)
                })
                .collect()
        })
        .collect();
    SeriesCollection {
        name: name.to_string(),
        frequency,
        series,
    }
}
