use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{HeadKind, ModelConfig};
use super::norm::{zscore_slice, NormStats, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::linalg::{Tape, Tensor, Var};
use crate::rslora::{AdaptedLinear, FactorVars, LowRankAdapter};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// How the adapter factors enter a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterMode {
    /// Frozen path only, as if no adapter were attached.
    Bypass,
    /// Factors recorded as constants.
    Frozen,
    /// Factors recorded as gradient-carrying leaves.
    Trainable,
}

/// Adapter hyperparameters shared by the embedding and head adapters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub sigma_x: f64,
    pub seed: u64,
}

impl AdapterSpec {
    pub fn new(rank: usize, seed: u64) -> Self {
        AdapterSpec {
            rank,
            alpha: 1.0,
            sigma_x: INIT_STD,
            seed,
        }
    }
}

/// Rank actually used by an adapter on a `d_out×d_in` weight.
pub fn effective_rank(requested: usize, d_out: usize, d_in: usize) -> usize {
    requested.min(d_out).min(d_in)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerNormAffine {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNormAffine {
    fn identity(dim: usize) -> Self {
        LayerNormAffine {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    fn pair(&self) -> Option<(&Tensor, &Tensor)> {
        Some((&self.gamma, &self.beta))
    }
}

/// Pre-norm decoder block. Weights are stored `in×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1: LayerNormAffine,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    ln2: LayerNormAffine,
    w_fc: Tensor,
    w_proj: Tensor,
}

impl Block {
    fn init(dim: usize, ffn: usize, layers: usize, rng: &mut ChaCha8Rng) -> Self {
        let resid = INIT_STD / (2.0 * layers as f64).sqrt();
        Block {
            ln1: LayerNormAffine::identity(dim),
            w_q: Tensor::randn(&[dim, dim], INIT_STD, rng),
            w_k: Tensor::randn(&[dim, dim], INIT_STD, rng),
            w_v: Tensor::randn(&[dim, dim], INIT_STD, rng),
            w_o: Tensor::randn(&[dim, dim], resid, rng),
            ln2: LayerNormAffine::identity(dim),
            w_fc: Tensor::randn(&[dim, ffn], INIT_STD, rng),
            w_proj: Tensor::randn(&[ffn, dim], resid, rng),
        }
    }

    fn named(&self, i: usize) -> Vec<(String, &Tensor)> {
        let p = |n: &str| format!("blocks.{i}.{n}");
        vec![
            (p("ln1.gamma"), &self.ln1.gamma),
            (p("ln1.beta"), &self.ln1.beta),
            (p("attn.w_q"), &self.w_q),
            (p("attn.w_k"), &self.w_k),
            (p("attn.w_v"), &self.w_v),
            (p("attn.w_o"), &self.w_o),
            (p("ln2.gamma"), &self.ln2.gamma),
            (p("ln2.beta"), &self.ln2.beta),
            (p("mlp.w_fc"), &self.w_fc),
            (p("mlp.w_proj"), &self.w_proj),
        ]
    }

    fn record<'w>(&'w self, tape: &mut Tape<'w>, h: Var, seq: usize, heads: usize) -> Result<Var> {
        let a = tape.layer_norm(h, LN_EPS, self.ln1.pair())?;
        let q = tape.matmul_frozen(a, &self.w_q)?;
        let k = tape.matmul_frozen(a, &self.w_k)?;
        let v = tape.matmul_frozen(a, &self.w_v)?;
        let att = tape.causal_attention(q, k, v, seq, heads)?;
        let o = tape.matmul_frozen(att, &self.w_o)?;
        let h = tape.add(h, o)?;
        let a = tape.layer_norm(h, LN_EPS, self.ln2.pair())?;
        let f = tape.matmul_frozen(a, &self.w_fc)?;
        let f = tape.gelu(f);
        let f = tape.matmul_frozen(f, &self.w_proj)?;
        tape.add(h, f)
    }
}

/// Tape handles produced by [`FrozenTransformer::record`].
#[derive(Clone, Debug)]
pub struct Recorded {
    /// Head output before denormalization (`B×out`).
    pub normalized: Var,
    /// Forecast in data units, or class logits.
    pub output: Var,
    /// Embedding and head factors when recorded as leaves or constants.
    pub factors: Option<[FactorVars; 2]>,
    pub stats: Vec<NormStats>,
}

/// GPT-style decoder with frozen blocks and adapted embedding/head projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenTransformer {
    config: ModelConfig,
    spec: AdapterSpec,
    embed: AdaptedLinear,
    blocks: Vec<Block>,
    ln_f: LayerNormAffine,
    head: AdaptedLinear,
    #[serde(skip)]
    updates: usize,
}

pub const ADAPTER_NAMES: [&str; 2] = ["embed", "head"];

impl FrozenTransformer {
    pub fn new(config: ModelConfig, spec: AdapterSpec) -> Result<Self> {
        config.validate()?;
        let dim = config.hidden_dim;
        let (pd, hin, hout) = (config.patch_width(), config.head_in(), config.head_out());
        let mut rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let w_embed = Tensor::randn(&[dim, pd], INIT_STD, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| Block::init(dim, config.ffn_mult * dim, config.layers, &mut rng))
            .collect();
        let w_head = Tensor::randn(&[hout, hin], INIT_STD, &mut rng);

        if spec.rank == 0 {
            return Err(Error::Rank {
                rank: 0,
                d_out: dim,
                d_in: pd,
            });
        }
        let mut arng = ChaCha8Rng::seed_from_u64(spec.seed);
        let a_embed = LowRankAdapter::init_with_rng(
            dim,
            pd,
            effective_rank(spec.rank, dim, pd),
            spec.alpha,
            spec.sigma_x,
            &mut arng,
        )?;
        let a_head = LowRankAdapter::init_with_rng(
            hout,
            hin,
            effective_rank(spec.rank, hout, hin),
            spec.alpha,
            spec.sigma_x,
            &mut arng,
        )?;
        Ok(FrozenTransformer {
            embed: AdaptedLinear::new(w_embed, a_embed)?,
            blocks,
            ln_f: LayerNormAffine::identity(dim),
            head: AdaptedLinear::new(w_head, a_head)?,
            config,
            spec,
            updates: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapter_spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn embed(&self) -> &AdaptedLinear {
        &self.embed
    }

    pub fn head(&self) -> &AdaptedLinear {
        &self.head
    }

    pub fn adapters(&self) -> [&AdaptedLinear; 2] {
        [&self.embed, &self.head]
    }

    pub(crate) fn adapters_mut(&mut self) -> [&mut AdaptedLinear; 2] {
        [&mut self.embed, &mut self.head]
    }

    /// Number of optimizer updates applied to the adapters.
    pub fn update_count(&self) -> usize {
        self.updates
    }

    pub(crate) fn note_update(&mut self) {
        self.updates += 1;
    }

    /// All non-adapter tensors in a fixed order.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed.w".to_string(), self.embed.base())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out.push(("ln_f.gamma".to_string(), &self.ln_f.gamma));
        out.push(("ln_f.beta".to_string(), &self.ln_f.beta));
        out.push(("head.w".to_string(), self.head.base()));
        out
    }

    /// Adapter factors, `{name}.y` then `{name}.x` per adapter.
    pub fn adapter_tensors(&self) -> Vec<(String, &Tensor)> {
        ADAPTER_NAMES
            .iter()
            .zip(self.adapters())
            .flat_map(|(n, a)| {
                [
                    (format!("{n}.y"), a.adapter().y()),
                    (format!("{n}.x"), a.adapter().x()),
                ]
            })
            .collect()
    }

    /// Replaces adapter factors by name, as produced by [`Self::adapter_tensors`].
    pub fn load_adapter_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        for (n, layer) in ADAPTER_NAMES.iter().zip(self.adapters_mut()) {
            let y = find(format!("{n}.y"))?;
            let x = find(format!("{n}.x"))?;
            layer.adapter_mut().set_factors(y, x)?;
        }
        Ok(())
    }

    /// SHA-256 over the shapes and bits of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.frozen_tensors() {
            h.update(name.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters().iter().map(|a| a.adapter().num_params()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn output_width(&self) -> usize {
        self.config.head_out()
    }

    fn window_len(&self) -> usize {
        self.config.input_length * self.config.n_vars
    }

    /// Records a forward pass over `windows`, each a row-major `L×d` slice.
    pub fn record<'w>(
        &'w self,
        tape: &mut Tape<'w>,
        windows: &[&[f64]],
        mode: AdapterMode,
    ) -> Result<Recorded> {
        let cfg = &self.config;
        let (b, n, d) = (windows.len(), cfg.num_patches(), cfg.n_vars);
        if b == 0 {
            return Err(Error::Config("empty batch".to_string()));
        }
        let mut tokens = Vec::with_capacity(b * self.window_len());
        let mut stats = Vec::with_capacity(b);
        for w in windows {
            if w.len() != self.window_len() {
                return Err(Error::Config(format!(
                    "window has {} values, expected L·d = {}·{}",
                    w.len(),
                    cfg.input_length,
                    d
                )));
            }
            let (z, s) = zscore_slice(w, d, DEFAULT_EPS)?;
            tokens.extend(z);
            stats.push(s);
        }
        let input = tape.input(Tensor::matrix(b * n, cfg.patch_width(), tokens)?);

        let factors = match mode {
            AdapterMode::Bypass => None,
            AdapterMode::Frozen | AdapterMode::Trainable => {
                let mut leaf = |t: &Tensor| match mode {
                    AdapterMode::Trainable => tape.param(t.clone()),
                    _ => tape.constant(t.clone()),
                };
                let mut vars = |a: &AdaptedLinear| FactorVars {
                    y: leaf(a.adapter().y()),
                    x: leaf(a.adapter().x()),
                };
                Some([vars(&self.embed), vars(&self.head)])
            }
        };

        let mut h = self
            .embed
            .forward_on_tape(tape, input, factors.map(|f| f[0]))?;
        for block in &self.blocks {
            h = block.record(tape, h, n, cfg.heads)?;
        }
        let h = tape.layer_norm(h, LN_EPS, self.ln_f.pair())?;
        let features = match cfg.head {
            HeadKind::Forecast => tape.reshape(h, &[b, n * cfg.hidden_dim])?,
            HeadKind::Classify => tape.mean_pool(h, n)?,
        };
        let normalized = self
            .head
            .forward_on_tape(tape, features, factors.map(|f| f[1]))?;

        let output = match cfg.head {
            HeadKind::Classify => normalized,
            HeadKind::Forecast => {
                let width = cfg.head_out();
                let mut scale = Vec::with_capacity(b * width);
                let mut shift = Vec::with_capacity(b * width);
                for s in &stats {
                    for c in 0..width {
                        scale.push(s.divisor(c % d));
                        shift.push(s.mean[c % d]);
                    }
                }
                let scale = tape.constant(Tensor::matrix(b, width, scale)?);
                let shift = tape.constant(Tensor::matrix(b, width, shift)?);
                let scaled = tape.mul(normalized, scale)?;
                tape.add(scaled, shift)?
            }
        };
        Ok(Recorded {
            normalized,
            output,
            factors,
            stats,
        })
    }

    /// Outputs for a batch of windows as a `B×out` tensor.
    pub fn forward_batch(&self, windows: &[&[f64]], mode: AdapterMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, windows, mode)?;
        Ok(tape.value(rec.output).clone())
    }

    /// Forecast (`horizon×d`) or logits (length `n_classes`) for one `L×d` window.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        self.forward_with(window, AdapterMode::Frozen)
    }

    /// Same as [`Self::forward`] with the adapters removed.
    pub fn forward_without_adapters(&self, window: &Tensor) -> Result<Tensor> {
        self.forward_with(window, AdapterMode::Bypass)
    }

    fn forward_with(&self, window: &Tensor, mode: AdapterMode) -> Result<Tensor> {
        let cfg = &self.config;
        if window.shape() != [cfg.input_length, cfg.n_vars] {
            return Err(Error::Config(format!(
                "window shape {:?} does not match L×d = {}×{}",
                window.shape(),
                cfg.input_length,
                cfg.n_vars
            )));
        }
        let out = self.forward_batch(&[window.data()], mode)?;
        match cfg.head {
            HeadKind::Forecast => out.reshape(&[cfg.horizon, cfg.n_vars]),
            HeadKind::Classify => out.reshape(&[cfg.n_classes]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden_dim: 8,
            patch_size: 4,
            input_length: 12,
            label_length: 0,
            horizon: 4,
            n_vars: 2,
            head,
            n_classes: 3,
            ffn_mult: 2,
            backbone_seed: 7,
        }
    }

    fn window(seed: u64, cfg: &ModelConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[cfg.input_length, cfg.n_vars], -3.0, 3.0, &mut rng)
    }

    #[test]
    fn etth1_forecast_shape() {
        let mut cfg = ModelConfig::etth1();
        cfg.layers = 1;
        let m = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(4, 0)).unwrap();
        let out = m.forward(&window(1, &cfg)).unwrap();
        assert_eq!(out.shape(), &[96, 7]);
    }

    #[test]
    fn fresh_adapters_leave_output_unchanged() {
        for head in [HeadKind::Forecast, HeadKind::Classify] {
            let cfg = tiny(head);
            let m = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(3, 1)).unwrap();
            let w = window(2, &cfg);
            assert_eq!(
                m.forward(&w).unwrap().data(),
                m.forward_without_adapters(&w).unwrap().data()
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(HeadKind::Forecast);
        let a = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(2, 5)).unwrap();
        let b = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(2, 5)).unwrap();
        let w = window(3, &cfg);
        assert!(a.forward(&w).unwrap().bit_eq(&b.forward(&w).unwrap()));
        assert_eq!(a.frozen_checksum(), b.frozen_checksum());
    }

    #[test]
    fn affine_shift_gives_same_normalized_output() {
        let cfg = tiny(HeadKind::Forecast);
        let mut m = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(2, 5)).unwrap();
        // Nonzero Y so the adapter path participates.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layer in m.adapters_mut() {
            let a = layer.adapter_mut();
            let y = Tensor::randn(a.y().shape(), 0.1, &mut rng);
            let x = a.x().clone();
            a.set_factors(y, x).unwrap();
        }
        let w = window(4, &cfg);
        let shifted = w.map(|v| 2.5 * v - 7.0);
        let run = |w: &Tensor| {
            let mut tape = Tape::new();
            let r = m.record(&mut tape, &[w.data()], AdapterMode::Frozen).unwrap();
            (tape.value(r.normalized).clone(), tape.value(r.output).clone())
        };
        let (n1, o1) = run(&w);
        let (n2, o2) = run(&shifted);
        assert!(n1.max_abs_diff(&n2) < 1e-9);
        assert!(o1.map(|v| 2.5 * v - 7.0).max_abs_diff(&o2) < 1e-8);
    }

    #[test]
    fn trainable_leaves_match_count() {
        let cfg = tiny(HeadKind::Forecast);
        let m = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(3, 0)).unwrap();
        let w = window(0, &cfg);
        let mut tape = Tape::new();
        let r = m.record(&mut tape, &[w.data()], AdapterMode::Trainable).unwrap();
        let loss = tape.sum(r.output);
        let g = tape.backward(loss).unwrap();
        let f = r.factors.unwrap();
        let n: usize = f
            .iter()
            .flat_map(|fv| [fv.y, fv.x])
            .map(|v| g.get(v).unwrap().numel())
            .sum();
        assert_eq!(n, m.trainable_count());
        assert_eq!(n, 3 * (8 + 8) + 3 * (8 + 24));
    }

    #[test]
    fn ranks_clamp_per_adapter() {
        let cfg = tiny(HeadKind::Forecast);
        let m = FrozenTransformer::new(cfg, AdapterSpec::new(20, 0)).unwrap();
        assert_eq!(m.embed().adapter().rank(), 8);
        assert_eq!(m.head().adapter().rank(), 8);
    }

    #[test]
    fn wrong_window_shape_is_config_error() {
        let cfg = tiny(HeadKind::Forecast);
        let m = FrozenTransformer::new(cfg, AdapterSpec::new(2, 0)).unwrap();
        let w = Tensor::zeros(&[10, 2]);
        assert!(matches!(m.forward(&w), Err(Error::Config(_))));
    }

    #[test]
    fn constant_window_is_finite() {
        let cfg = tiny(HeadKind::Forecast);
        let m = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(2, 0)).unwrap();
        let w = Tensor::full(&[cfg.input_length, cfg.n_vars], 3.0);
        assert!(m.forward(&w).unwrap().is_finite());
    }
}
