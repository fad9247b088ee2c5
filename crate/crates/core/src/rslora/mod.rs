//! Rank-stabilized low-rank adapters.
//!
//! A frozen weight `W_o` (`d×d′`) is adapted as `W_o + β_r·Y·X` with
//! `Y: d×r` initialized to zero, `X: r×d′` drawn from `N(0, σ_X²)`, and
//! `β_r = α/√r`. Because `Y` starts at zero the adapted layer reproduces the
//! frozen layer exactly until the first update.

pub mod stability;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Tape, Tensor, Var};

pub use stability::{
    stability_experiment, MomentRow, StabilityReport, StabilizationConfig, Verdict,
};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_SIGMA_X: f64 = 0.02;

/// `α/√r`.
pub fn scaling_factor(rank: usize, alpha: f64) -> Result<f64> {
    scaling_factor_with_exponent(rank, alpha, 0.5)
}

/// `α/r^γ`; `γ = ½` is the rank-stabilized choice.
pub fn scaling_factor_with_exponent(rank: usize, alpha: f64, gamma: f64) -> Result<f64> {
    if rank == 0 {
        return Err(Error::Domain("rank must be at least 1".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    if gamma == 0.5 {
        Ok(alpha / (rank as f64).sqrt())
    } else {
        Ok(alpha / (rank as f64).powf(gamma))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    y: Tensor,
    x: Tensor,
    rank: usize,
    alpha: f64,
    sigma_x: f64,
    beta: f64,
}

impl LowRankAdapter {
    pub fn init(
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        sigma_x: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(d_out, d_in, rank, alpha, sigma_x, &mut rng)
    }

    pub fn init_with_rng<R: rand::Rng + ?Sized>(
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        sigma_x: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::Rank {
                rank,
                d_out,
                d_in,
            });
        }
        if !(sigma_x.is_finite() && sigma_x > 0.0) {
            return Err(Error::Domain(format!("sigma_x must be positive, got {sigma_x}")));
        }
        let beta = scaling_factor(rank, alpha)?;
        Ok(LowRankAdapter {
            y: Tensor::zeros(&[d_out, rank]),
            x: Tensor::randn(&[rank, d_in], sigma_x, rng),
            rank,
            alpha,
            sigma_x,
            beta,
        })
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn d_out(&self) -> usize {
        self.y.rows()
    }

    pub fn d_in(&self) -> usize {
        self.x.cols()
    }

    /// `r·(d + d′)`.
    pub fn num_params(&self) -> usize {
        self.y.numel() + self.x.numel()
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.beta = scaling_factor(self.rank, alpha)?;
        self.alpha = alpha;
        Ok(())
    }

    /// Replaces both factors; shapes must not change.
    pub fn set_factors(&mut self, y: Tensor, x: Tensor) -> Result<()> {
        if y.shape() != self.y.shape() {
            return Err(Error::dim("set_factors", self.y.shape(), y.shape()));
        }
        if x.shape() != self.x.shape() {
            return Err(Error::dim("set_factors", self.x.shape(), x.shape()));
        }
        self.y = y;
        self.x = x;
        Ok(())
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.y, &mut self.x)
    }

    /// `ΔW = β·Y·X`, materialized.
    pub fn delta_weight(&self) -> Tensor {
        self.y
            .matmul(&self.x)
            .expect("factor shapes are consistent")
            .scale(self.beta)
    }
}

/// Tape handles for the two trainable factors of an adapter.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars {
    pub y: Var,
    pub x: Var,
}

/// A frozen `W_o` with a trainable low-rank adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLinear {
    base: Tensor,
    adapter: LowRankAdapter,
    #[serde(skip)]
    steps_taken: usize,
}

impl AdaptedLinear {
    pub fn new(base: Tensor, adapter: LowRankAdapter) -> Result<Self> {
        if base.shape().len() != 2
            || base.rows() != adapter.d_out()
            || base.cols() != adapter.d_in()
        {
            return Err(Error::dim(
                "adapted_linear",
                base.shape(),
                &[adapter.d_out(), adapter.d_in()],
            ));
        }
        Ok(AdaptedLinear {
            base,
            adapter,
            steps_taken: 0,
        })
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn adapter(&self) -> &LowRankAdapter {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LowRankAdapter {
        &mut self.adapter
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    /// `W_o·z + β·Y·(X·z)`. Accepts a vector of length `d′` or a batch of
    /// rows `n×d′`; `ΔW` is never materialized.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let rows = self.as_rows(z, "adapter_forward")?;
        let base = rows.matmul(&self.base.transpose())?;
        let low = rows
            .matmul(&self.adapter.x.transpose())?
            .matmul(&self.adapter.y.transpose())?
            .scale(self.adapter.beta);
        let out = base.add(&low)?;
        if z.shape().len() == 1 {
            Ok(Tensor::vector(out.into_data()))
        } else {
            Ok(out)
        }
    }

    fn as_rows(&self, z: &Tensor, op: &'static str) -> Result<Tensor> {
        if z.cols() != self.d_in() || z.shape().len() > 2 {
            return Err(Error::dim(op, z.shape(), &[self.d_in()]));
        }
        z.reshape(&[z.rows(), z.cols()])
    }

    /// Gradients of the loss w.r.t. `Y` and `X` given the loss gradient `v`
    /// at the adapter output: `∂Y = β·v·zᵀ·Xᵀ`, `∂X = β·Yᵀ·v·zᵀ`.
    ///
    /// Batched inputs (`n×d′` with `n×d` cotangents) sum over the batch.
    pub fn analytic_grads(&self, z: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let zr = self.as_rows(z, "analytic_grads")?;
        if v.cols() != self.d_out() || v.rows() != zr.rows() || v.shape().len() > 2 {
            return Err(Error::dim("analytic_grads", v.shape(), &[zr.rows(), self.d_out()]));
        }
        let vr = v.reshape(&[v.rows(), v.cols()])?;
        let beta = self.adapter.beta;
        // (X·z)ᵀ rows: n×r, and (Yᵀ·v)ᵀ rows: n×r
        let xz = zr.matmul(&self.adapter.x.transpose())?;
        let ytv = vr.matmul(&self.adapter.y)?;
        let grad_y = vr.transpose().matmul(&xz)?.scale(beta);
        let grad_x = ytv.transpose().matmul(&zr)?.scale(beta);
        Ok((grad_y, grad_x))
    }

    /// `W_o + β·Y·X`.
    pub fn merge(&self) -> Tensor {
        self.base
            .add(&self.adapter.delta_weight())
            .expect("delta has the base shape")
    }

    /// One plain SGD step on the summed loss of `batch`, a list of
    /// `(z, v)` pairs. Both factors update from the pre-step values.
    pub fn sgd_step(&mut self, batch: &[(Tensor, Tensor)], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be non-negative, got {lr}")));
        }
        let mut gy = Tensor::zeros(self.adapter.y.shape());
        let mut gx = Tensor::zeros(self.adapter.x.shape());
        for (z, v) in batch {
            let (y, x) = self.analytic_grads(z, v)?;
            gy = gy.add(&y)?;
            gx = gx.add(&x)?;
        }
        self.steps_taken += 1;
        if !gy.is_finite() || !gx.is_finite() {
            return Err(Error::Numeric(format!(
                "adapter gradient at step {}",
                self.steps_taken
            )));
        }
        if lr == 0.0 {
            return Ok(());
        }
        let (y, x) = self.adapter.factors_mut();
        axpy(y, -lr, &gy);
        axpy(x, -lr, &gx);
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Records the layer on `tape` for a row batch `input` (`n×d′`).
    ///
    /// With `factors = None` only the frozen path is evaluated.
    pub fn forward_on_tape<'w>(
        &'w self,
        tape: &mut Tape<'w>,
        input: Var,
        factors: Option<FactorVars>,
    ) -> Result<Var> {
        let base = tape.matmul_frozen_t(input, &self.base)?;
        let Some(f) = factors else {
            return Ok(base);
        };
        let xz = tape.matmul_nt(input, f.x)?;
        let yxz = tape.matmul_nt(xz, f.y)?;
        let scaled = tape.scale(yxz, self.adapter.beta);
        tape.add(base, scaled)
    }
}

fn axpy(target: &mut Tensor, a: f64, x: &Tensor) {
    for (t, v) in target.data_mut().iter_mut().zip(x.data()) {
        *t += a * v;
    }
}
