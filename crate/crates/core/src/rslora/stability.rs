//! Monte-Carlo check of rank stability.
//!
//! Fresh adapters `β·Y·X` (`Y = 0`, `X ~ N(0, σ_X²)`) are trained for a few
//! SGD steps on i.i.d. standard-Gaussian inputs `z_k` with i.i.d.
//! standard-Gaussian output cotangents `v_k` (the gradient of a linear loss
//! `v_kᵀ·f(z_k)`). After every step the per-entry `n`-th moments of the
//! adapter output `β·Y·X·z` and of the input gradient `β·Xᵀ·Yᵀ·v` are
//! estimated on fresh draws.
//!
//! To leading order in `β`, the second moments after `i` steps are
//!
//! ```text
//! E[f_j²]  = η²·β⁴·i·σ⁴·r·d′·(r + d′ + 1)
//! E[g_c²]  = η²·β⁴·i·σ⁴·r·d ·(r + d′ + 1)
//! ```
//!
//! so `β = α/r^γ` keeps them rank-independent as `r → ∞` exactly when
//! `γ = ½`. The finite-rank correction is `(d′ + 1)/r`, which is why the
//! default input width is small relative to the tested ranks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scaling_factor_with_exponent;
use crate::error::{Error, Result};
use crate::exec::{pairwise_sum, Execution};
use crate::linalg::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizationConfig {
    pub ranks: Vec<usize>,
    /// Exponents `γ` in `β = α/r^γ`.
    pub gammas: Vec<f64>,
    pub moment_order: u32,
    pub steps: usize,
    pub learning_rate: f64,
    pub seeds: usize,
    /// Adapter input width `d′`.
    pub input_dim: usize,
    /// Adapter output width `d`.
    pub output_dim: usize,
    pub alpha: f64,
    pub sigma_x: f64,
    /// Fresh inputs per seed used to estimate the moments.
    pub eval_samples: usize,
    pub base_seed: u64,
}

impl Default for StabilizationConfig {
    fn default() -> Self {
        StabilizationConfig {
            ranks: vec![4, 16, 64, 256],
            gammas: vec![0.0, 0.5, 1.0],
            moment_order: 2,
            steps: 5,
            learning_rate: 0.1,
            seeds: 1024,
            input_dim: 1,
            output_dim: 8,
            alpha: 1.0,
            sigma_x: super::DEFAULT_SIGMA_X,
            eval_samples: 64,
            base_seed: 0,
        }
    }
}

impl StabilizationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.ranks.is_empty() {
            problems.push("ranks must not be empty".to_string());
        }
        if self.ranks.contains(&0) {
            problems.push("ranks must be positive".to_string());
        }
        if self.gammas.is_empty() {
            problems.push("gammas must not be empty".to_string());
        }
        if self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            problems.push("gammas must be finite and non-negative".to_string());
        }
        if self.moment_order == 0 {
            problems.push("moment_order must be at least 1".to_string());
        }
        if self.steps == 0 {
            problems.push("steps must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive".to_string());
        }
        if self.seeds < 8 {
            problems.push(format!("seeds must be at least 8, got {}", self.seeds));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            problems.push("input_dim and output_dim must be positive".to_string());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            problems.push("alpha must be positive".to_string());
        }
        if !(self.sigma_x.is_finite() && self.sigma_x > 0.0) {
            problems.push("sigma_x must be positive".to_string());
        }
        if self.eval_samples == 0 {
            problems.push("eval_samples must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// One CSV row. `None` marks a cell that overflowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub rank: usize,
    pub gamma: f64,
    pub step: usize,
    pub moment_order: u32,
    pub output_moment: Option<f64>,
    pub input_grad_moment: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// max/min across ranks below 2.
    Stable,
    /// Moment shrinks with rank.
    Collapse,
    /// Moment grows with rank.
    Diverge,
    /// Some cell overflowed.
    Overflow,
}

/// Per-γ summary of the output moment at the final step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub gamma: f64,
    pub ratio_max_min: f64,
    /// Moment at the largest rank divided by the moment at the smallest.
    pub last_over_first: f64,
    pub strictly_increasing: bool,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rows: Vec<MomentRow>,
    pub summary: Vec<GammaSummary>,
}

impl StabilityReport {
    /// Final-step output moments for `gamma`, in rank order.
    pub fn final_output_moments(&self, gamma: f64) -> Vec<(usize, Option<f64>)> {
        let last = self.rows.iter().map(|r| r.step).max().unwrap_or(0);
        self.rows
            .iter()
            .filter(|r| r.gamma == gamma && r.step == last)
            .map(|r| (r.rank, r.output_moment))
            .collect()
    }

    pub fn summary_for(&self, gamma: f64) -> Option<&GammaSummary> {
        self.summary.iter().find(|s| s.gamma == gamma)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "rank",
            "gamma",
            "step",
            "moment_order",
            "output_moment",
            "input_grad_moment",
            "seeds",
        ])?;
        let cell = |v: Option<f64>| v.map_or_else(|| "overflow".to_string(), |x| format!("{x:e}"));
        for r in &self.rows {
            w.write_record([
                r.rank.to_string(),
                r.gamma.to_string(),
                r.step.to_string(),
                r.moment_order.to_string(),
                cell(r.output_moment),
                cell(r.input_grad_moment),
                r.seeds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-seed, per-γ, per-step `(output moment, input-gradient moment)`.
type SeedMoments = Vec<Vec<(f64, f64)>>;

fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn run_seed(cfg: &StabilizationConfig, rank: usize, seed: usize) -> Result<SeedMoments> {
    let (d, dp) = (cfg.output_dim, cfg.input_dim);
    let n = cfg.moment_order as i32;
    // Inputs and cotangents are shared across ranks and γ (common random numbers).
    let mut data_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.base_seed, &[seed as u64]));
    let train: Vec<(Tensor, Tensor)> = (0..cfg.steps)
        .map(|_| {
            (
                Tensor::randn(&[1, dp], 1.0, &mut data_rng),
                Tensor::randn(&[1, d], 1.0, &mut data_rng),
            )
        })
        .collect();
    let eval_z = Tensor::randn(&[cfg.eval_samples, dp], 1.0, &mut data_rng);
    let eval_v = Tensor::randn(&[cfg.eval_samples, d], 1.0, &mut data_rng);

    let mut init_rng =
        ChaCha8Rng::seed_from_u64(stream_seed(cfg.base_seed, &[seed as u64, rank as u64]));
    let x0 = Tensor::randn(&[rank, dp], cfg.sigma_x, &mut init_rng);

    let mut per_gamma = Vec::with_capacity(cfg.gammas.len());
    for &gamma in &cfg.gammas {
        let beta = scaling_factor_with_exponent(rank, cfg.alpha, gamma)?;
        let mut y = Tensor::zeros(&[d, rank]);
        let mut x = x0.clone();
        let mut per_step = Vec::with_capacity(cfg.steps);
        for (z, v) in &train {
            // ∂Y = β·v·(X·z)ᵀ, ∂X = β·(Yᵀ·v)·zᵀ, both from the pre-step factors
            let xz = z.matmul(&x.transpose())?;
            let ytv = v.matmul(&y)?;
            let gy = v.transpose().matmul(&xz)?.scale(beta);
            let gx = ytv.transpose().matmul(z)?.scale(beta);
            y = y.sub(&gy.scale(cfg.learning_rate))?;
            x = x.sub(&gx.scale(cfg.learning_rate))?;

            let out = eval_z
                .matmul(&x.transpose())?
                .matmul(&y.transpose())?
                .scale(beta);
            let grad_in = eval_v.matmul(&y)?.matmul(&x)?.scale(beta);
            let m_out = out.data().iter().map(|a| a.powi(n)).sum::<f64>() / out.numel() as f64;
            let m_in =
                grad_in.data().iter().map(|a| a.powi(n)).sum::<f64>() / grad_in.numel() as f64;
            per_step.push((m_out, m_in));
        }
        per_gamma.push(per_step);
    }
    Ok(per_gamma)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Runs the experiment. Seeds run on `exec`; aggregation is by pairwise
/// summation in seed order, so the result does not depend on scheduling.
pub fn stability_experiment(cfg: &StabilizationConfig, exec: Execution) -> Result<StabilityReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = cfg
        .ranks
        .iter()
        .flat_map(|&r| (0..cfg.seeds).map(move |s| (r, s)))
        .collect();
    let results = exec.map(&jobs, |&(r, s)| run_seed(cfg, r, s));
    let results: Vec<SeedMoments> = results.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (ri, &rank) in cfg.ranks.iter().enumerate() {
        let seeds = &results[ri * cfg.seeds..(ri + 1) * cfg.seeds];
        for (gi, &gamma) in cfg.gammas.iter().enumerate() {
            for step in 0..cfg.steps {
                let outs: Vec<f64> = seeds.iter().map(|s| s[gi][step].0).collect();
                let ins: Vec<f64> = seeds.iter().map(|s| s[gi][step].1).collect();
                rows.push(MomentRow {
                    rank,
                    gamma,
                    step: step + 1,
                    moment_order: cfg.moment_order,
                    output_moment: finite(pairwise_sum(&outs) / cfg.seeds as f64),
                    input_grad_moment: finite(pairwise_sum(&ins) / cfg.seeds as f64),
                    seeds: cfg.seeds,
                });
            }
        }
    }

    let mut report = StabilityReport {
        rows,
        summary: Vec::new(),
    };
    report.summary = cfg
        .gammas
        .iter()
        .map(|&g| summarize(g, &report.final_output_moments(g)))
        .collect();
    Ok(report)
}

fn summarize(gamma: f64, moments: &[(usize, Option<f64>)]) -> GammaSummary {
    let values: Option<Vec<f64>> = moments.iter().map(|(_, m)| *m).collect();
    let Some(values) = values.filter(|v| !v.is_empty()) else {
        return GammaSummary {
            gamma,
            ratio_max_min: f64::NAN,
            last_over_first: f64::NAN,
            strictly_increasing: false,
            verdict: Verdict::Overflow,
        };
    };
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = max / min;
    let last_over_first = values[values.len() - 1] / values[0];
    let strictly_increasing = values.windows(2).all(|w| w[1] > w[0]);
    let verdict = if ratio < 2.0 {
        Verdict::Stable
    } else if last_over_first < 1.0 {
        Verdict::Collapse
    } else {
        Verdict::Diverge
    };
    GammaSummary {
        gamma,
        ratio_max_min: ratio,
        last_over_first,
        strictly_increasing,
        verdict,
    }
}
