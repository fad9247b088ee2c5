use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::train::TrainConfig;
use crate::backbone::{effective_rank, HeadKind, ModelConfig};
use crate::data::{DatasetManifest, Frequency};
use crate::error::{Error, Result};
use crate::rslora::stability::StabilizationConfig;

fn default_alpha() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    0.02
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_stride() -> usize {
    1
}
fn default_tolerance() -> f64 {
    0.05
}

/// Cross-dataset evaluation on M-style collections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotSpec {
    pub sources: Vec<DatasetManifest>,
    pub targets: Vec<DatasetManifest>,
    pub frequencies: Vec<Frequency>,
    /// Input length as a multiple of the frequency's horizon.
    #[serde(default = "default_lookback")]
    pub lookback: usize,
}

fn default_lookback() -> usize {
    2
}

/// One experiment. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    /// Path of a dataset manifest, relative to the spec file.
    #[serde(default)]
    pub dataset_manifest: Option<PathBuf>,
    /// Inline dataset manifest.
    #[serde(default)]
    pub dataset: Option<DatasetManifest>,
    pub model: ModelConfig,
    /// Forecast horizons to run; defaults to `model.horizon`.
    #[serde(default)]
    pub horizons: Vec<usize>,
    pub ranks: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_sigma")]
    pub sigma_x: f64,
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub few_shot: Option<f64>,
    /// Relative MSE tolerance of the saturation rank.
    #[serde(default = "default_tolerance")]
    pub saturation_tolerance: f64,
    #[serde(default)]
    pub stability: Option<StabilizationConfig>,
    #[serde(default)]
    pub zero_shot: Option<ZeroShotSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Parses a spec file, resolving relative paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec: ExperimentSpec = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e
                .span()
                .map_or(0, |s| text[..s.start].lines().count() as u64),
            message: e.message().to_string(),
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        spec.resolve_paths(dir)?;
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, dir: &Path) -> Result<()> {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        if let Some(m) = self.dataset_manifest.clone() {
            let m = if m.is_relative() { dir.join(m) } else { m };
            if m.exists() {
                self.dataset = Some(DatasetManifest::from_file(&m)?);
            }
            self.dataset_manifest = Some(m);
        }
        if let Some(d) = self.dataset.as_mut() {
            fix(&mut d.path);
        }
        if let Some(z) = self.zero_shot.as_mut() {
            for d in z.sources.iter_mut().chain(z.targets.iter_mut()) {
                fix(&mut d.path);
            }
        }
        Ok(())
    }

    pub fn horizons(&self) -> Vec<usize> {
        if self.horizons.is_empty() {
            vec![self.model.horizon]
        } else {
            self.horizons.clone()
        }
    }

    pub fn model_for(&self, horizon: usize) -> ModelConfig {
        ModelConfig {
            horizon,
            ..self.model.clone()
        }
    }

    /// Largest rank any adapter of `cfg` can use.
    pub fn max_rank(cfg: &ModelConfig) -> usize {
        crate::accounting::adapter_dims(cfg)
            .iter()
            .map(|&(o, i)| effective_rank(usize::MAX, o, i))
            .max()
            .unwrap_or(0)
    }

    /// Every problem with the spec, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.model.problems();
        if self.ranks.is_empty() {
            p.push("rank list is empty".into());
        }
        for h in self.horizons() {
            let cfg = self.model_for(h);
            let max = Self::max_rank(&cfg);
            for &r in &self.ranks {
                if r == 0 || (max > 0 && r > max) {
                    p.push(format!("rank {r} outside 1..={max} for horizon {h}"));
                }
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            p.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.sigma_x.is_finite() && self.sigma_x > 0.0) {
            p.push(format!("sigma_x must be positive, got {}", self.sigma_x));
        }
        if self.seeds.is_empty() {
            p.push("seed list is empty".into());
        }
        if self.train.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate >= 0.0) {
            p.push("train.learning_rate must be finite and non-negative".into());
        }
        if self.stride == 0 {
            p.push("stride must be positive".into());
        }
        if let Some(f) = self.few_shot {
            if !(f > 0.0 && f <= 1.0) {
                p.push(format!("few_shot must be in (0, 1], got {f}"));
            }
        }
        if !(self.saturation_tolerance >= 0.0) {
            p.push("saturation_tolerance must be non-negative".into());
        }
        if self.model.head == HeadKind::Classify {
            p.push("the CLI runs forecast heads only; classification is library-only".into());
        }
        if self.dataset_manifest.is_some() && self.dataset.is_none() {
            p.push(format!(
                "dataset manifest {} does not exist",
                self.dataset_manifest.as_ref().unwrap().display()
            ));
        }
        if let Some(d) = &self.dataset {
            p.extend(d.problems());
            if d.n_vars != self.model.n_vars {
                p.push(format!(
                    "dataset has {} variables but model.n_vars is {}",
                    d.n_vars, self.model.n_vars
                ));
            }
        }
        if let Some(s) = &self.stability {
            if let Err(Error::Validation(v)) = s.validate() {
                p.extend(v.into_iter().map(|m| format!("stability: {m}")));
            }
        }
        if let Some(z) = &self.zero_shot {
            for d in z.sources.iter().chain(&z.targets) {
                p.extend(d.problems());
            }
            if z.frequencies.is_empty() {
                p.push("zero_shot.frequencies is empty".into());
            }
            if z.lookback == 0 {
                p.push("zero_shot.lookback must be positive".into());
            }
            for f in &z.frequencies {
                if let Some(h) = f.m_horizon() {
                    if (z.lookback * h) % self.model.patch_size.max(1) != 0 {
                        p.push(format!(
                            "patch_size {} does not divide zero-shot input length {} for {f}",
                            self.model.patch_size,
                            z.lookback * h
                        ));
                    }
                }
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    pub fn require_dataset(&self) -> Result<&DatasetManifest> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Validation(vec!["spec has no dataset".into()]))
    }

    /// SHA-256 of the canonical (key-sorted) JSON form.
    pub fn hash(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let bytes = serde_json::to_vec(&v)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
        ranks = [2, 8]
        seeds = [1, 2]
        [model]
        layers = 1
        heads = 2
        hidden_dim = 8
        patch_size = 4
        input_length = 16
        horizon = 4
        n_vars = 2
        [train]
        learning_rate = 0.01
        batch_size = 8
        epochs = 1
        [dataset]
        name = "s"
        frequency = "hourly"
        n_vars = 2
        [dataset.synth]
        kind = "multi-sine"
        length = 300
    "#;

    #[test]
    fn parses_and_validates() {
        let s: ExperimentSpec = toml::from_str(SPEC).unwrap();
        s.validate().unwrap();
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: ExperimentSpec = toml::from_str(SPEC).unwrap();
        let reordered = SPEC.replace("ranks = [2, 16]\n        seeds = [1, 2]", "seeds = [1, 2]\n        ranks = [2, 16]");
        let b: ExperimentSpec = toml::from_str(&reordered).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn all_problems_reported() {
        let mut s: ExperimentSpec = toml::from_str(SPEC).unwrap();
        s.ranks.clear();
        s.seeds.clear();
        s.alpha = -1.0;
        let p = s.problems();
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn unknown_key_is_error() {
        let bad = format!("typo_field = 1\n{SPEC}");
        assert!(toml::from_str::<ExperimentSpec>(&bad).is_err());
    }
}
